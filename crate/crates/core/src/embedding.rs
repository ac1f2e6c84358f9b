//! Gaussian embeddings of interactions and knowledge components.
//!
//! A token at position `t` practising KC `c` on question `q` with response `r`
//! is embedded as two diagonal Gaussians:
//!
//! * interaction side: `mean = z[c] + resp_mean[r] * v[c]`, `cov = z[c] + resp_cov[r] * v[c]`
//! * KC side:          `mean = z[c] + diff_mean[q] * v[c]`, `cov = z[c] + diff_cov[q] * v[c]`
//!
//! Position rows are then added to both sides and the covariance is made
//! strictly positive with `ELU(x) + 1`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::StudentSequence;
use crate::error::{Error, Result};
use crate::tensor::{elu_plus_one, Graph, Tensor, Var};

/// Learnable lookup tables, each with `d` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    /// KC latent vectors `z` (`num_kcs x d`).
    pub kc_latent: Tensor,
    /// Per-KC variation vectors `v` (`num_kcs x d`).
    pub kc_variation: Tensor,
    /// Question difficulty, mean side (`num_questions x d`).
    pub difficulty_mean: Tensor,
    /// Question difficulty, covariance side (`num_questions x d`).
    pub difficulty_cov: Tensor,
    /// Response vectors, mean side (`2 x d`, row = response).
    pub response_mean: Tensor,
    /// Response vectors, covariance side (`2 x d`).
    pub response_cov: Tensor,
    pub position_mean: Tensor,
    pub position_cov: Tensor,
}

pub const TABLE_NAMES: [&str; 8] = [
    "kc_latent",
    "kc_variation",
    "difficulty_mean",
    "difficulty_cov",
    "response_mean",
    "response_cov",
    "position_mean",
    "position_cov",
];

impl EmbeddingTables {
    /// All tables drawn from `N(0, 1/sqrt(d))`.
    pub fn init(num_kcs: usize, num_questions: usize, max_len: usize, d: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let mut table = |rows: usize| {
            let data = (0..rows * d).map(|_| normal.sample(rng)).collect();
            Tensor::new(vec![rows, d], data).expect("shape")
        };
        Self {
            kc_latent: table(num_kcs),
            kc_variation: table(num_kcs),
            difficulty_mean: table(num_questions),
            difficulty_cov: table(num_questions),
            response_mean: table(2),
            response_cov: table(2),
            position_mean: table(max_len),
            position_cov: table(max_len),
        }
    }

    pub fn zeros(num_kcs: usize, num_questions: usize, max_len: usize, d: usize) -> Self {
        Self {
            kc_latent: Tensor::zeros(&[num_kcs, d]),
            kc_variation: Tensor::zeros(&[num_kcs, d]),
            difficulty_mean: Tensor::zeros(&[num_questions, d]),
            difficulty_cov: Tensor::zeros(&[num_questions, d]),
            response_mean: Tensor::zeros(&[2, d]),
            response_cov: Tensor::zeros(&[2, d]),
            position_mean: Tensor::zeros(&[max_len, d]),
            position_cov: Tensor::zeros(&[max_len, d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.kc_latent.dims2().map(|(_, d)| d).unwrap_or(0)
    }

    pub fn max_len(&self) -> usize {
        self.position_mean.dims2().map(|(r, _)| r).unwrap_or(0)
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.kc_latent,
            &self.kc_variation,
            &self.difficulty_mean,
            &self.difficulty_cov,
            &self.response_mean,
            &self.response_cov,
            &self.position_mean,
            &self.position_cov,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.kc_latent,
            &mut self.kc_variation,
            &mut self.difficulty_mean,
            &mut self.difficulty_cov,
            &mut self.response_mean,
            &mut self.response_cov,
            &mut self.position_mean,
            &mut self.position_cov,
        ]
    }

    /// Registers the tables on a graph.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> EmbeddingVars {
        let [a, b, c, d, e, f, p, q] = self.tensors().map(|t| g.leaf(t.clone(), requires_grad));
        EmbeddingVars {
            kc_latent: a,
            kc_variation: b,
            difficulty_mean: c,
            difficulty_cov: d,
            response_mean: e,
            response_cov: f,
            position_mean: p,
            position_cov: q,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVars {
    pub kc_latent: Var,
    pub kc_variation: Var,
    pub difficulty_mean: Var,
    pub difficulty_cov: Var,
    pub response_mean: Var,
    pub response_cov: Var,
    pub position_mean: Var,
    pub position_cov: Var,
}

impl EmbeddingVars {
    pub fn all(&self) -> [Var; 8] {
        [
            self.kc_latent,
            self.kc_variation,
            self.difficulty_mean,
            self.difficulty_cov,
            self.response_mean,
            self.response_cov,
            self.position_mean,
            self.position_cov,
        ]
    }
}

/// Row-aligned token ids for a flattened batch of sequences.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenIds {
    pub kcs: Vec<usize>,
    pub questions: Vec<usize>,
    pub responses: Vec<usize>,
    pub positions: Vec<usize>,
}

impl TokenIds {
    pub fn from_sequence(seq: &StudentSequence) -> Self {
        Self::from_sequences(std::slice::from_ref(seq))
    }

    pub fn from_sequences(seqs: &[StudentSequence]) -> Self {
        let mut ids = TokenIds::default();
        for s in seqs {
            for (t, it) in s.interactions.iter().enumerate() {
                ids.kcs.push(it.kc());
                ids.questions.push(it.question_id);
                ids.responses.push(it.response as usize);
                ids.positions.push(t);
            }
        }
        ids
    }

    pub fn len(&self) -> usize {
        self.kcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kcs.is_empty()
    }

    /// Verifies every id against the table sizes.
    pub fn check(&self, tables: &EmbeddingTables) -> Result<()> {
        let rows = |t: &Tensor| t.dims2().map(|(r, _)| r).unwrap_or(0);
        let check = |ids: &[usize], limit: usize, what: &str| -> Result<()> {
            match ids.iter().find(|&&i| i >= limit) {
                Some(i) => Err(Error::Lookup(format!("{what} id {i} outside table of {limit} rows"))),
                None => Ok(()),
            }
        };
        check(&self.kcs, rows(&tables.kc_latent), "KC")?;
        check(&self.questions, rows(&tables.difficulty_mean), "question")?;
        check(&self.responses, 2, "response")?;
        if let Some(&p) = self.positions.iter().max() {
            if p >= tables.max_len() {
                return Err(Error::Config(format!(
                    "sequence length {} exceeds max_len {}",
                    p + 1,
                    tables.max_len()
                )));
            }
        }
        Ok(())
    }
}

/// A pair of graph values holding per-token means and diagonal covariances.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mean: Var,
    pub cov: Var,
}

/// Per-token diagonal Gaussians of one sequence, with a padding mask
/// (`true` = real token).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSeq {
    pub mean: Tensor,
    pub cov: Tensor,
    pub mask: Vec<bool>,
}

impl GaussianSeq {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn from_graph(g: &Graph, v: GaussianVars) -> Self {
        let mean = g.value(v.mean).clone();
        let rows = mean.dims2().map(|(r, _)| r).unwrap_or(0);
        Self { mean, cov: g.value(v.cov).clone(), mask: vec![true; rows] }
    }
}

/// `base[c] + scale[row] * variation[c]` for every token.
fn rasch(g: &mut Graph, base: Var, variation: Var, scale: Var, kcs: &[usize], rows: &[usize]) -> Result<Var> {
    let z = g.gather_rows(base, kcs)?;
    let v = g.gather_rows(variation, kcs)?;
    let s = g.gather_rows(scale, rows)?;
    let sv = g.mul(s, v)?;
    Ok(g.add(z, sv)?)
}

/// Raw interaction-side embedding (response term).
pub fn embed_interactions_graph(g: &mut Graph, t: &EmbeddingVars, ids: &TokenIds) -> Result<GaussianVars> {
    Ok(GaussianVars {
        mean: rasch(g, t.kc_latent, t.kc_variation, t.response_mean, &ids.kcs, &ids.responses)?,
        cov: rasch(g, t.kc_latent, t.kc_variation, t.response_cov, &ids.kcs, &ids.responses)?,
    })
}

/// Raw KC-side embedding (question difficulty term). With
/// `use_difficulty = false` the difficulty term is dropped and both sides
/// reduce to the KC latent vector.
pub fn embed_kcs_graph(g: &mut Graph, t: &EmbeddingVars, ids: &TokenIds, use_difficulty: bool) -> Result<GaussianVars> {
    if !use_difficulty {
        let z = g.gather_rows(t.kc_latent, &ids.kcs)?;
        return Ok(GaussianVars { mean: z, cov: z });
    }
    Ok(GaussianVars {
        mean: rasch(g, t.kc_latent, t.kc_variation, t.difficulty_mean, &ids.kcs, &ids.questions)?,
        cov: rasch(g, t.kc_latent, t.kc_variation, t.difficulty_cov, &ids.kcs, &ids.questions)?,
    })
}

pub fn add_positions_graph(g: &mut Graph, t: &EmbeddingVars, x: GaussianVars, positions: &[usize]) -> Result<GaussianVars> {
    let pm = g.gather_rows(t.position_mean, positions)?;
    let pc = g.gather_rows(t.position_cov, positions)?;
    Ok(GaussianVars { mean: g.add(x.mean, pm)?, cov: g.add(x.cov, pc)? })
}

/// `cov = ELU(cov_raw) + 1`; the mean passes through.
pub fn activate_covariance_graph(g: &mut Graph, x: GaussianVars) -> GaussianVars {
    GaussianVars { mean: x.mean, cov: g.elu_plus_one(x.cov) }
}

fn run_single(seq: &StudentSequence, tables: &EmbeddingTables, f: impl FnOnce(&mut Graph, &EmbeddingVars, &TokenIds) -> Result<GaussianVars>) -> Result<GaussianSeq> {
    let ids = TokenIds::from_sequence(seq);
    ids.check(tables)?;
    let mut g = Graph::new();
    let vars = tables.bind(&mut g, false);
    let out = f(&mut g, &vars, &ids)?;
    Ok(GaussianSeq::from_graph(&g, out))
}

/// Raw (pre-activation) interaction Gaussians of one sequence.
pub fn embed_interactions(seq: &StudentSequence, tables: &EmbeddingTables) -> Result<GaussianSeq> {
    run_single(seq, tables, |g, t, ids| embed_interactions_graph(g, t, ids))
}

/// Raw (pre-activation) KC Gaussians of one sequence.
pub fn embed_kcs(seq: &StudentSequence, tables: &EmbeddingTables) -> Result<GaussianSeq> {
    run_single(seq, tables, |g, t, ids| embed_kcs_graph(g, t, ids, true))
}

/// Adds position rows to unmasked tokens.
pub fn add_positions(x: &GaussianSeq, tables: &EmbeddingTables) -> Result<GaussianSeq> {
    let len = x.len();
    if len > tables.max_len() {
        return Err(Error::Config(format!("sequence length {len} exceeds max_len {}", tables.max_len())));
    }
    let d = tables.dim();
    let mut out = x.clone();
    for t in (0..len).filter(|&t| x.mask[t]) {
        for k in 0..d {
            out.mean.data_mut()[t * d + k] += tables.position_mean.data()[t * d + k];
            out.cov.data_mut()[t * d + k] += tables.position_cov.data()[t * d + k];
        }
    }
    Ok(out)
}

pub fn activate_covariance(x: &GaussianSeq) -> GaussianSeq {
    let mut out = x.clone();
    for v in out.cov.data_mut() {
        *v = elu_plus_one(*v);
    }
    out
}
