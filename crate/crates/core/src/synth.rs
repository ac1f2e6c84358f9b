//! Synthetic student cohorts with a guess/slip response model.
//!
//! Student `i` has ability `a_i` and learning rate `l_i`. KC `c` has
//! difficulty `b_c` and each of its questions an offset `e_q`. After `n`
//! earlier practices of KC `c` the student knows the answer with
//! probability
//!
//! ```text
//! p = sigmoid(slope * (a_i + l_i * n - b_c - e_q))
//! ```
//!
//! and answers correctly with probability `p (1 - slip) + (1 - p) guess`.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, Interaction, StudentSequence, Vocabs};
use crate::error::{Error, Result};
use crate::tensor::sigmoid;

/// Ability distribution of one group of students.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cohort {
    /// Relative share of the students.
    pub weight: f64,
    pub ability_mean: f64,
    pub ability_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_students: usize,
    pub num_kcs: usize,
    pub questions_per_kc: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub cohorts: Vec<Cohort>,
    /// Mean skill gain per practice of a KC.
    pub learning_rate: f64,
    pub learning_rate_std: f64,
    pub difficulty_std: f64,
    pub question_std: f64,
    /// Steepness of the mastery link.
    pub slope: f64,
    /// Probability that the next interaction practises the same KC again.
    pub repeat_prob: f64,
    pub guess: f64,
    pub slip: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_students: 200,
            num_kcs: 100,
            questions_per_kc: 2,
            min_len: 50,
            max_len: 200,
            cohorts: vec![Cohort { weight: 1.0, ability_mean: 0.0, ability_std: 1.0 }],
            learning_rate: 0.1,
            learning_rate_std: 0.05,
            difficulty_std: 1.0,
            question_std: 0.3,
            slope: 10.0,
            repeat_prob: 0.6,
            guess: 0.0,
            slip: 0.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_students == 0 || self.num_kcs == 0 || self.questions_per_kc == 0 {
            return bad("students, KCs and questions per KC must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("invalid length range {}..={}", self.min_len, self.max_len));
        }
        for (name, p) in [("guess", self.guess), ("slip", self.slip)] {
            if !(0.0..0.5).contains(&p) {
                return bad(format!("{name} probability {p} outside [0, 0.5)"));
            }
        }
        if !(0.0..=1.0).contains(&self.repeat_prob) {
            return bad(format!("repeat probability {} outside [0, 1]", self.repeat_prob));
        }
        if self.cohorts.is_empty() || self.cohorts.iter().any(|c| !(c.weight > 0.0) || !(c.ability_std >= 0.0)) {
            return bad("cohorts need positive weights and nonnegative spreads".into());
        }
        let stds = [self.learning_rate_std, self.difficulty_std, self.question_std];
        if stds.iter().any(|s| !(*s >= 0.0)) || !self.slope.is_finite() || !self.learning_rate.is_finite() {
            return bad("spreads must be nonnegative and parameters finite".into());
        }
        Ok(())
    }

    /// Cohort of each student, assigned in contiguous proportional blocks.
    pub fn cohort_of_students(&self) -> Vec<usize> {
        let total: f64 = self.cohorts.iter().map(|c| c.weight).sum();
        let mut bounds = Vec::with_capacity(self.cohorts.len());
        let mut acc = 0.0;
        for c in &self.cohorts {
            acc += c.weight / total;
            bounds.push(acc);
        }
        (0..self.num_students)
            .map(|i| {
                let u = (i as f64 + 0.5) / self.num_students as f64;
                bounds.iter().position(|&b| u < b).unwrap_or(self.cohorts.len() - 1)
            })
            .collect()
    }
}

/// Generated data with the ground truth behind it.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub bundle: DatasetBundle,
    /// Per sequence and position, the probability of a correct response.
    pub correct_prob: Vec<Vec<f64>>,
    /// Cohort index of each sequence.
    pub cohort: Vec<usize>,
    pub ability: Vec<f64>,
}

/// Draws a cohort. Deterministic given `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let normal = |m: f64, s: f64| Normal::new(m, s).map_err(|e| Error::Config(e.to_string()));
    let difficulty = normal(0.0, spec.difficulty_std)?;
    let kc_difficulty: Vec<f64> = (0..spec.num_kcs).map(|_| difficulty.sample(&mut rng)).collect();
    let offset = normal(0.0, spec.question_std)?;
    let question_offset: Vec<f64> = (0..spec.num_kcs * spec.questions_per_kc).map(|_| offset.sample(&mut rng)).collect();
    let lr_dist = normal(spec.learning_rate, spec.learning_rate_std)?;

    let mut vocabs = Vocabs::new();
    // stable raw ids: every KC and question is registered up front
    let kc_ids: Vec<usize> = (0..spec.num_kcs).map(|c| vocabs.kcs.insert(&format!("k{c}"))).collect();
    let q_ids: Vec<usize> =
        (0..spec.num_kcs * spec.questions_per_kc).map(|q| vocabs.questions.insert(&format!("q{q}"))).collect();

    let cohort = spec.cohort_of_students();
    let mut sequences = Vec::with_capacity(spec.num_students);
    let mut correct_prob = Vec::with_capacity(spec.num_students);
    let mut ability = Vec::with_capacity(spec.num_students);
    for (i, &c) in cohort.iter().enumerate() {
        let student = vocabs.students.insert(&format!("s{i}"));
        let co = &spec.cohorts[c];
        let a = normal(co.ability_mean, co.ability_std)?.sample(&mut rng);
        let lr = lr_dist.sample(&mut rng).max(0.0);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut practice = vec![0usize; spec.num_kcs];
        let mut kc = rng.random_range(0..spec.num_kcs);
        let mut interactions = Vec::with_capacity(len);
        let mut probs = Vec::with_capacity(len);
        for t in 0..len {
            if t > 0 && rng.random::<f64>() >= spec.repeat_prob {
                kc = rng.random_range(0..spec.num_kcs);
            }
            let q = kc * spec.questions_per_kc + rng.random_range(0..spec.questions_per_kc);
            let known = sigmoid(spec.slope * (a + lr * practice[kc] as f64 - kc_difficulty[kc] - question_offset[q]));
            let p = known * (1.0 - spec.slip) + (1.0 - known) * spec.guess;
            let r = u8::from(rng.random::<f64>() < p);
            practice[kc] += 1;
            let mut it = Interaction::new(q_ids[q], [kc_ids[kc]], r, t)?;
            it.timestamp = Some(t as i64);
            interactions.push(it);
            probs.push(p);
        }
        sequences.push(StudentSequence { student_id: student, interactions });
        correct_prob.push(probs);
        ability.push(a);
    }
    Ok(SynthOutput { bundle: DatasetBundle::from_vocabs(sequences, vocabs), correct_prob, cohort, ability })
}

/// The generated cohort without the ground truth.
pub fn generate_students(spec: &SynthSpec) -> Result<DatasetBundle> {
    Ok(generate(spec)?.bundle)
}
