//! The full network: Gaussian embeddings, Wasserstein attention blocks,
//! feed-forward refinement, the prediction head, and both training losses.
//!
//! Per position `t` the model predicts response `r_t` from the interactions
//! at `0..t` and the KC/question at `t`. Position 0 has no history and is
//! never scored.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_graph, AttentionConfig, ScoreKind, SegmentOptions};
use crate::data::{Interaction, StudentSequence};
use crate::embedding::{
    activate_covariance_graph, add_positions_graph, embed_interactions_graph, embed_kcs_graph, EmbeddingTables,
    EmbeddingVars, GaussianSeq, GaussianVars, TokenIds, TABLE_NAMES,
};
use crate::error::{Error, Result};
use crate::tensor::gradcheck::{finite_diff_check, CheckReport, GradCheckConfig};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub num_kcs: usize,
    pub num_questions: usize,
    /// Drop rate for attention links and FFN hidden units during training.
    pub dropout: f64,
    /// Attention score divisor; `None` means `sqrt(d)`.
    pub score_scale: Option<f64>,
    /// Use the per-question difficulty term on the KC side.
    pub use_question_difficulty: bool,
}

impl ModelConfig {
    pub fn new(num_kcs: usize, num_questions: usize) -> Self {
        Self {
            d: 64,
            heads: 4,
            blocks: 1,
            max_len: 200,
            num_kcs,
            num_questions,
            dropout: 0.0,
            score_scale: None,
            use_question_difficulty: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.blocks == 0 || self.max_len == 0 {
            return Err(Error::Config("d, blocks and max_len must be positive".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide dimension {}", self.heads, self.d)));
        }
        if self.num_kcs == 0 || self.num_questions == 0 {
            return Err(Error::Config("vocabulary sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(s) = self.score_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("score scale {s} must be positive")));
            }
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            scale: self.score_scale.unwrap_or((self.d as f64).sqrt()),
            causal: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClConvention {
    /// `-log(e^{W+} / (e^{W+} + sum_j e^{-W_j}))`: the corrupted view and the
    /// other batch members are both pushed away.
    Paper,
    /// `-log(e^{-W+} / (e^{-W+} + sum_j e^{-W_j}))`: the corrupted view is
    /// pulled in, batch members are pushed away.
    Infonce,
}

impl FromStr for ClConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "infonce" => Ok(Self::Infonce),
            _ => Err(Error::Config(format!("unknown contrastive convention `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    Mean,
    Sum,
}

impl FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            _ => Err(Error::Config(format!("unknown reduction `{s}`"))),
        }
    }
}

/// Loss and ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantConfig {
    pub use_cl: bool,
    pub use_wasserstein: bool,
    pub use_stochastic: bool,
    pub lambda: f64,
    pub cl_convention: ClConvention,
    pub reduction: Reduction,
    /// Pooled-state distances are clamped here before exponentiation.
    pub distance_cap: f64,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            use_cl: true,
            use_wasserstein: true,
            use_stochastic: true,
            lambda: 0.1,
            cl_convention: ClConvention::Paper,
            reduction: Reduction::Mean,
            distance_cap: 50.0,
        }
    }
}

impl VariantConfig {
    /// Weight actually applied to the contrastive term.
    pub fn effective_lambda(&self) -> f64 {
        if self.use_cl {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be a nonnegative number", self.lambda)));
        }
        if !(self.distance_cap > 0.0) {
            return Err(Error::Config(format!("distance cap {} must be positive", self.distance_cap)));
        }
        Ok(())
    }

    fn score_kind(&self) -> ScoreKind {
        if self.use_wasserstein {
            ScoreKind::Wasserstein
        } else {
            ScoreKind::DotProduct
        }
    }
}

/// The full model and its single-switch ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Ukt,
    #[serde(rename = "wo-cl")]
    WithoutCl,
    #[serde(rename = "wo-wdist")]
    WithoutWasserstein,
    #[serde(rename = "wo-stocemb")]
    WithoutStochastic,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::Ukt, Variant::WithoutCl, Variant::WithoutWasserstein, Variant::WithoutStochastic];

    /// Row label in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Ukt => "UKT",
            Variant::WithoutCl => "w/o CL",
            Variant::WithoutWasserstein => "w/o W.dist",
            Variant::WithoutStochastic => "w/o Stocemb",
        }
    }

    /// Command-line and config-file name.
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ukt => "ukt",
            Variant::WithoutCl => "wo-cl",
            Variant::WithoutWasserstein => "wo-wdist",
            Variant::WithoutStochastic => "wo-stocemb",
        }
    }

    /// Applies this variant's switch to `base`.
    pub fn apply(self, base: VariantConfig) -> VariantConfig {
        let full = VariantConfig { use_cl: true, use_wasserstein: true, use_stochastic: true, ..base };
        match self {
            Variant::Ukt => full,
            Variant::WithoutCl => VariantConfig { use_cl: false, ..full },
            Variant::WithoutWasserstein => VariantConfig { use_wasserstein: false, ..full },
            Variant::WithoutStochastic => VariantConfig { use_stochastic: false, ..full },
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ukt" | "full" => Ok(Variant::Ukt),
            "wo-cl" => Ok(Variant::WithoutCl),
            "wo-wdist" => Ok(Variant::WithoutWasserstein),
            "wo-stocemb" => Ok(Variant::WithoutStochastic),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected ukt, wo-cl, wo-wdist or wo-stocemb)"
            ))),
        }
    }
}

/// Weights of one refinement block. Matrices are stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnBlock {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
    pub w4: Tensor,
    pub b4: Tensor,
}

const BLOCK_NAMES: [&str; 8] = ["w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4"];

impl FfnBlock {
    fn init(d: usize, rng: &mut impl Rng) -> Self {
        let mut uniform = |fan_in: usize, fan_out: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
            Tensor::new(vec![fan_in, fan_out], data).expect("shape")
        };
        Self {
            w1: uniform(2 * d, d),
            b1: Tensor::zeros(&[d]),
            w2: uniform(d, d),
            b2: Tensor::zeros(&[d]),
            w3: uniform(2 * d, d),
            b3: Tensor::zeros(&[d]),
            w4: uniform(d, d),
            b4: Tensor::zeros(&[d]),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[2 * d, d]),
            b1: Tensor::zeros(&[d]),
            w2: Tensor::zeros(&[d, d]),
            b2: Tensor::zeros(&[d]),
            w3: Tensor::zeros(&[2 * d, d]),
            b3: Tensor::zeros(&[d]),
            w4: Tensor::zeros(&[d, d]),
            b4: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 8] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3, &self.w4, &self.b4]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.w4,
            &mut self.b4,
        ]
    }
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embed: EmbeddingTables,
    pub blocks: Vec<FfnBlock>,
    /// Prediction weights over `ReLU([h_mean; h_cov])`, shape `[2d, 1]`.
    pub head_w: Tensor,
    /// Prediction bias, shape `[1]`.
    pub head_b: Tensor,
}

impl ModelParams {
    /// Random initialisation from a seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        Self::init_with(config, &mut rng)
    }

    pub fn init_with(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let embed = EmbeddingTables::init(config.num_kcs, config.num_questions, config.max_len, d, rng);
        let blocks = (0..config.blocks).map(|_| FfnBlock::init(d, rng)).collect();
        let a = 1.0 / ((2 * d) as f64).sqrt();
        let head_w = Tensor::new(vec![2 * d, 1], (0..2 * d).map(|_| rng.random_range(-a..a)).collect())?;
        Ok(Self { config: config.clone(), embed, blocks, head_w, head_b: Tensor::zeros(&[1]) })
    }

    /// All weights zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        Ok(Self {
            config: config.clone(),
            embed: EmbeddingTables::zeros(config.num_kcs, config.num_questions, config.max_len, d),
            blocks: (0..config.blocks).map(|_| FfnBlock::zeros(d)).collect(),
            head_w: Tensor::zeros(&[2 * d, 1]),
            head_b: Tensor::zeros(&[1]),
        })
    }

    /// Tensor names in canonical order.
    pub fn names(&self) -> Vec<String> {
        param_names(self.blocks.len())
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.embed.tensors().to_vec();
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.embed.tensors_mut().into_iter().collect();
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names().into_iter().zip(self.tensors().into_iter().cloned()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds parameters from tensors in canonical order, checking shapes.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut out = Self::zeros(config)?;
        let names = out.names();
        if tensors.len() != names.len() {
            return Err(Error::Config(format!("expected {} tensors, got {}", names.len(), tensors.len())));
        }
        for ((slot, t), name) in out.tensors_mut().into_iter().zip(tensors).zip(&names) {
            if slot.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(out)
    }

    /// Places every tensor on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> ParamVars {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| g.leaf(t.clone(), requires_grad)).collect();
        ParamVars::from_slice(&vars, self.blocks.len()).expect("canonical layout")
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Writes the text checkpoint format.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let c = &self.config;
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(s, "d {}", c.d).unwrap();
        writeln!(s, "heads {}", c.heads).unwrap();
        writeln!(s, "blocks {}", c.blocks).unwrap();
        writeln!(s, "max_len {}", c.max_len).unwrap();
        writeln!(s, "num_kcs {}", c.num_kcs).unwrap();
        writeln!(s, "num_questions {}", c.num_questions).unwrap();
        writeln!(s, "dropout {}", c.dropout).unwrap();
        match c.score_scale {
            Some(v) => writeln!(s, "score_scale {v}").unwrap(),
            None => writeln!(s, "score_scale auto").unwrap(),
        }
        writeln!(s, "use_question_difficulty {}", c.use_question_difficulty).unwrap();
        for (name, t) in self.names().iter().zip(self.tensors()) {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(s, "tensor {name} {} {}", t.shape().len(), dims.join(" ")).unwrap();
            let vals: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
            writeln!(s, "{}", vals.join(" ")).unwrap();
        }
        writeln!(s, "end").unwrap();
        w.write_all(s.as_bytes()).map_err(|e| Error::io("<checkpoint>", e))
    }

    pub fn read_checkpoint(r: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(r).lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((_, Err(e))) => Err(Error::io("<checkpoint>", e)),
                None => Err(Error::Parse { line: 0, msg: format!("unexpected end of checkpoint, expected {what}") }),
            }
        };
        let (n, magic) = next("header")?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(Error::Parse { line: n, msg: format!("not a checkpoint (header `{magic}`)") });
        }
        let mut field = |key: &str| -> Result<(usize, String)> {
            let (n, l) = next(key)?;
            match l.split_once(' ') {
                Some((k, v)) if k == key => Ok((n, v.trim().to_string())),
                _ => Err(Error::Parse { line: n, msg: format!("expected `{key} <value>`") }),
            }
        };
        fn num<T: FromStr>((line, v): (usize, String)) -> Result<T> {
            v.parse().map_err(|_| Error::Parse { line, msg: format!("bad value `{v}`") })
        }
        let d = num(field("d")?)?;
        let heads = num(field("heads")?)?;
        let blocks = num(field("blocks")?)?;
        let max_len = num(field("max_len")?)?;
        let num_kcs = num(field("num_kcs")?)?;
        let num_questions = num(field("num_questions")?)?;
        let dropout = num(field("dropout")?)?;
        let (line, scale) = field("score_scale")?;
        let score_scale = if scale == "auto" { None } else { Some(num((line, scale))?) };
        let use_question_difficulty = num(field("use_question_difficulty")?)?;
        let config =
            ModelConfig { d, heads, blocks, max_len, num_kcs, num_questions, dropout, score_scale, use_question_difficulty };
        config.validate()?;

        let names = param_names(blocks);
        let mut tensors = Vec::with_capacity(names.len());
        for name in &names {
            let (n, head) = next("tensor header")?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() < 3 || parts[0] != "tensor" || parts[1] != name {
                return Err(Error::Parse { line: n, msg: format!("expected header for tensor {name}") });
            }
            let rank: usize = num((n, parts[2].to_string()))?;
            if parts.len() != 3 + rank {
                return Err(Error::Parse { line: n, msg: format!("tensor {name}: rank {rank} but {} dims", parts.len() - 3) });
            }
            let shape = parts[3..].iter().map(|p| num((n, p.to_string()))).collect::<Result<Vec<usize>>>()?;
            let (n, body) = next("tensor values")?;
            let data = body.split_whitespace().map(|p| num((n, p.to_string()))).collect::<Result<Vec<f64>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Parse { line: n, msg: e.to_string() })?;
            tensors.push(t);
        }
        let (n, end) = next("end")?;
        if end.trim() != "end" {
            return Err(Error::Parse { line: n, msg: "expected `end`".into() });
        }
        Self::from_tensors(&config, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(&mut f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(f)
    }
}

pub const CHECKPOINT_MAGIC: &str = "ukt-checkpoint v1";

fn param_names(blocks: usize) -> Vec<String> {
    let mut names: Vec<String> = TABLE_NAMES.iter().map(|n| format!("embed.{n}")).collect();
    for b in 0..blocks {
        names.extend(BLOCK_NAMES.iter().map(|n| format!("block{b}.{n}")));
    }
    names.push("head.w".into());
    names.push("head.b".into());
    names
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
    pub w4: Var,
    pub b4: Var,
}

/// Graph handles for every parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub embed: EmbeddingVars,
    pub blocks: Vec<BlockVars>,
    pub head_w: Var,
    pub head_b: Var,
}

impl ParamVars {
    /// Handles in canonical order (see [`ModelParams::names`]).
    pub fn from_slice(vars: &[Var], blocks: usize) -> Result<Self> {
        if vars.len() != 8 + 8 * blocks + 2 {
            return Err(Error::Config(format!("{} handles for a {blocks}-block model", vars.len())));
        }
        let embed = EmbeddingVars {
            kc_latent: vars[0],
            kc_variation: vars[1],
            difficulty_mean: vars[2],
            difficulty_cov: vars[3],
            response_mean: vars[4],
            response_cov: vars[5],
            position_mean: vars[6],
            position_cov: vars[7],
        };
        let blocks = vars[8..8 + 8 * blocks]
            .chunks(8)
            .map(|c| BlockVars { w1: c[0], b1: c[1], w2: c[2], b2: c[3], w3: c[4], b3: c[5], w4: c[6], b4: c[7] })
            .collect();
        Ok(Self { embed, blocks, head_w: vars[vars.len() - 2], head_b: vars[vars.len() - 1] })
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out = self.embed.all().to_vec();
        for b in &self.blocks {
            out.extend([b.w1, b.b1, b.w2, b.b2, b.w3, b.b3, b.w4, b.b4]);
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

/// Dropout state for one forward pass. Inactive unless built with a rate
/// and a generator.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut Xoshiro256PlusPlus>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'a mut Xoshiro256PlusPlus) -> Self {
        Self { rate, rng: Some(rng) }
    }

    fn active(&self) -> bool {
        self.rate > 0.0 && self.rng.is_some()
    }

    /// `n` draws, `true` = dropped.
    fn draw(&mut self, n: usize) -> Option<Vec<bool>> {
        let rate = self.rate;
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => Some((0..n).map(|_| rng.random::<f64>() < rate).collect()),
            _ => None,
        }
    }

    /// Inverted dropout on a matrix.
    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if !self.active() {
            return Ok(x);
        }
        let shape = g.shape(x).to_vec();
        let n = g.value(x).len();
        let keep = 1.0 / (1.0 - self.rate);
        let mask = self.draw(n).expect("active");
        let m = Tensor::new(shape, mask.into_iter().map(|d| if d { 0.0 } else { keep }).collect())?;
        let m = g.constant(m);
        Ok(g.mul(x, m)?)
    }
}

/// One refinement block on a graph: the mean path
/// `W2 ReLU(W1 [h;M] + b1) + b2` and the covariance path
/// `ELU(W4 ReLU(W3 [h;M] + b3) + b4) + 1`. With `stochastic = false` the
/// covariance output is constant ones.
pub fn ffn_refine_graph(
    g: &mut Graph,
    b: &BlockVars,
    h: GaussianVars,
    m: GaussianVars,
    stochastic: bool,
    dropout: &mut Dropout<'_>,
) -> Result<GaussianVars> {
    let xm = g.concat_cols(&[h.mean, m.mean])?;
    let a = g.matmul(xm, b.w1)?;
    let a = g.add_row(a, b.b1)?;
    let a = g.relu(a);
    let a = dropout.apply(g, a)?;
    let a = g.matmul(a, b.w2)?;
    let mean = g.add_row(a, b.b2)?;
    let cov = if stochastic {
        let xc = g.concat_cols(&[h.cov, m.cov])?;
        let c = g.matmul(xc, b.w3)?;
        let c = g.add_row(c, b.b3)?;
        let c = g.relu(c);
        let c = dropout.apply(g, c)?;
        let c = g.matmul(c, b.w4)?;
        let c = g.add_row(c, b.b4)?;
        g.elu_plus_one(c)
    } else {
        let shape = g.shape(mean).to_vec();
        g.constant(Tensor::full(&shape, 1.0))
    };
    Ok(GaussianVars { mean, cov })
}

/// `w . ReLU([h_mean; h_cov]) + b` per row, shape `[N, 1]`.
pub fn predict_logit_graph(g: &mut Graph, head_w: Var, head_b: Var, h: GaussianVars) -> Result<Var> {
    let x = g.concat_cols(&[h.mean, h.cov])?;
    let x = g.relu(x);
    let eta = g.matmul(x, head_w)?;
    Ok(g.add_row(eta, head_b)?)
}

/// Binary cross-entropy of the selected logit rows.
pub fn bce_loss_graph(g: &mut Graph, logits: Var, rows: &[usize], targets: &[f64], reduction: Reduction) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::Evaluation("no predicted positions in batch".into()));
    }
    let picked = g.gather_rows(logits, rows)?;
    let terms = g.bce_with_logits(picked, targets)?;
    let total = g.sum(terms);
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => g.scale(total, 1.0 / rows.len() as f64),
    })
}

/// Contrastive loss over pooled states: `anchors` and `negatives` are
/// `[B, d]` with row `i` of `negatives` built from anchor `i`'s sequence.
pub fn contrastive_loss_graph(
    g: &mut Graph,
    anchors: GaussianVars,
    negatives: GaussianVars,
    convention: ClConvention,
    cap: f64,
) -> Result<Var> {
    let b = g.shape(anchors.mean)[0];
    if b < 2 {
        return Err(Error::Evaluation("contrastive loss needs at least two anchors".into()));
    }
    let sa = g.sqrt(anchors.cov)?;
    let sn = g.sqrt(negatives.cov)?;
    let xa = g.concat_cols(&[anchors.mean, sa])?;
    let xn = g.concat_cols(&[negatives.mean, sn])?;
    // distance of each anchor to its own negative, [B, 1]
    let diff = g.sub(xa, xn)?;
    let sq = g.square(diff);
    let pos = g.sum_axis(sq, 1)?;
    let pos = g.clamp_max(pos, cap);
    // in-batch distances, [B, B]
    let pair = g.pairwise_sq_dist(xa, xa)?;
    let pair = g.clamp_max(pair, cap);
    let neg_pair = g.neg(pair);
    let e_pair = g.exp(neg_pair);
    let off_diag = Tensor::new(vec![b, b], (0..b * b).map(|k| if k / b == k % b { 0.0 } else { 1.0 }).collect())?;
    let off_diag = g.constant(off_diag);
    let e_pair = g.mul(e_pair, off_diag)?;
    let others = g.sum_axis(e_pair, 1)?;
    // L_i = log(e^{s_i} + others_i) - s_i with s_i = +pos for `Paper`, -pos for `Infonce`
    let s = match convention {
        ClConvention::Paper => pos,
        ClConvention::Infonce => g.neg(pos),
    };
    let e_s = g.exp(s);
    let denom = g.add(e_s, others)?;
    let log_denom = g.log(denom)?;
    let per_anchor = g.sub(log_denom, s)?;
    Ok(g.mean(per_anchor)?)
}

/// `prediction + lambda * contrastive`.
pub fn total_loss_graph(g: &mut Graph, prediction: Var, contrastive: Option<Var>, lambda: f64) -> Result<Var> {
    match contrastive {
        Some(c) if lambda > 0.0 => {
            let w = g.scale(c, lambda);
            Ok(g.add(prediction, w)?)
        }
        _ => Ok(prediction),
    }
}

/// Responses of the contrastive counterpart: if the last answer is correct,
/// every earlier correct answer becomes incorrect; if it is incorrect, every
/// earlier incorrect answer becomes correct. The last answer is kept.
/// `None` for sequences shorter than two.
pub fn negative_responses(responses: &[u8]) -> Option<Vec<u8>> {
    let (&last, earlier) = responses.split_last()?;
    if earlier.is_empty() {
        return None;
    }
    let mut out: Vec<u8> = earlier.iter().map(|&r| if r == last { 1 - last } else { r }).collect();
    out.push(last);
    Some(out)
}

/// The contrastive counterpart of `seq`, or `None` when it has fewer than two
/// interactions.
pub fn build_negative_sequence(seq: &StudentSequence) -> Option<StudentSequence> {
    negative_responses(&seq.responses()).map(|r| seq.with_responses(&r))
}

/// Graph handles produced by [`forward_graph`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// One logit per token, `[N, 1]`.
    pub logits: Var,
    /// Refined states, `[N, d]`.
    pub states: GaussianVars,
    /// Last-position states, `[B, d]`.
    pub pooled: GaussianVars,
    /// `(start, len)` of each sequence in the flattened token axis.
    pub spans: Vec<(usize, usize)>,
    /// Embedded KC side, `[N, d]`; reused by the counterpart pass.
    pub kc_side: GaussianVars,
}

impl ForwardVars {
    /// Token rows that are scored (every position except the first of each
    /// sequence).
    pub fn predicted_rows(&self) -> Vec<usize> {
        self.spans.iter().flat_map(|&(s, l)| (s + 1)..(s + l)).collect()
    }
}

fn spans_of(batch: &[StudentSequence]) -> Vec<(usize, usize)> {
    let mut start = 0;
    batch
        .iter()
        .map(|s| {
            let span = (start, s.len());
            start += s.len();
            span
        })
        .collect()
}

fn ones_like(g: &mut Graph, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    g.constant(Tensor::full(&shape, 1.0))
}

/// Interaction-side tokens for a flattened batch.
fn embed_values(
    g: &mut Graph,
    pv: &ParamVars,
    ids: &TokenIds,
    stochastic: bool,
) -> Result<GaussianVars> {
    let e = embed_interactions_graph(g, &pv.embed, ids)?;
    let e = add_positions_graph(g, &pv.embed, e, &ids.positions)?;
    if stochastic {
        Ok(activate_covariance_graph(g, e))
    } else {
        Ok(GaussianVars { mean: e.mean, cov: ones_like(g, e.mean) })
    }
}

/// Attention blocks over flattened sequences. With `pool_only` the last
/// block is queried at the final position of each sequence only and the
/// result has one row per sequence.
#[allow(clippy::too_many_arguments)]
fn run_blocks(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    variant: &VariantConfig,
    m: GaussianVars,
    e: GaussianVars,
    spans: &[(usize, usize)],
    pool_only: bool,
    dropout: &mut Dropout<'_>,
) -> Result<GaussianVars> {
    let att = cfg.attention();
    let kind = variant.score_kind();
    let mut values = e;
    let last_rows: Vec<usize> = spans.iter().map(|&(s, l)| s + l - 1).collect();
    let n_blocks = pv.blocks.len();
    for (bi, block) in pv.blocks.iter().enumerate() {
        let pooled = pool_only && bi + 1 == n_blocks;
        let mut means = Vec::with_capacity(spans.len());
        let mut covs = Vec::with_capacity(spans.len());
        for &(start, len) in spans {
            let key = GaussianVars { mean: g.slice_rows(m.mean, start, len)?, cov: g.slice_rows(m.cov, start, len)? };
            let val =
                GaussianVars { mean: g.slice_rows(values.mean, start, len)?, cov: g.slice_rows(values.cov, start, len)? };
            let (query, offset) = if pooled {
                let q = GaussianVars {
                    mean: g.slice_rows(key.mean, len - 1, 1)?,
                    cov: g.slice_rows(key.cov, len - 1, 1)?,
                };
                (q, len - 1)
            } else {
                (key, 0)
            };
            let tq = len - offset;
            let dropped = if dropout.active() { dropout.draw(tq * len) } else { None };
            let opts = SegmentOptions { kind, query_offset: offset, strict: bi == 0, dropped: dropped.as_deref() };
            let h = attend_graph(g, query, key, val, &att, opts)?;
            means.push(h.mean);
            covs.push(h.cov);
        }
        let h = GaussianVars { mean: g.concat_rows(&means)?, cov: g.concat_rows(&covs)? };
        let m_rows = if pooled {
            GaussianVars { mean: g.gather_rows(m.mean, &last_rows)?, cov: g.gather_rows(m.cov, &last_rows)? }
        } else {
            m
        };
        values = ffn_refine_graph(g, block, h, m_rows, variant.use_stochastic, dropout)?;
    }
    Ok(values)
}

/// Forward pass of a batch on a graph.
pub fn forward_graph(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    variant: &VariantConfig,
    batch: &[StudentSequence],
    dropout: &mut Dropout<'_>,
) -> Result<ForwardVars> {
    if batch.is_empty() || batch.iter().any(|s| s.is_empty()) {
        return Err(Error::Data("forward needs nonempty sequences".into()));
    }
    let ids = TokenIds::from_sequences(batch);
    if ids.kcs.iter().any(|&k| k >= cfg.num_kcs) || ids.questions.iter().any(|&q| q >= cfg.num_questions) {
        return Err(Error::Lookup(format!(
            "token ids exceed model vocabulary ({} KCs, {} questions)",
            cfg.num_kcs, cfg.num_questions
        )));
    }
    if let Some(s) = batch.iter().find(|s| s.len() > cfg.max_len) {
        return Err(Error::Config(format!("sequence length {} exceeds max_len {}", s.len(), cfg.max_len)));
    }
    if ids.responses.iter().any(|&r| r > 1) {
        return Err(Error::Lookup("response outside {0, 1}".into()));
    }
    let spans = spans_of(batch);
    let m = embed_kcs_graph(g, &pv.embed, &ids, cfg.use_question_difficulty)?;
    let m = add_positions_graph(g, &pv.embed, m, &ids.positions)?;
    let m = if variant.use_stochastic {
        activate_covariance_graph(g, m)
    } else {
        GaussianVars { mean: m.mean, cov: ones_like(g, m.mean) }
    };
    let e = embed_values(g, pv, &ids, variant.use_stochastic)?;
    let states = run_blocks(g, pv, cfg, variant, m, e, &spans, false, dropout)?;
    let logits = predict_logit_graph(g, pv.head_w, pv.head_b, states)?;
    let last: Vec<usize> = spans.iter().map(|&(s, l)| s + l - 1).collect();
    let pooled = GaussianVars { mean: g.gather_rows(states.mean, &last)?, cov: g.gather_rows(states.cov, &last)? };
    Ok(ForwardVars { logits, states, pooled, spans, kc_side: m })
}

/// Pooled states of the counterpart sequences for the batch members listed
/// in `members`. The KC side is shared with the anchor pass.
pub fn negative_pooled_graph(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    variant: &VariantConfig,
    batch: &[StudentSequence],
    fwd: &ForwardVars,
    members: &[usize],
    dropout: &mut Dropout<'_>,
) -> Result<GaussianVars> {
    let mut negatives = Vec::with_capacity(members.len());
    let mut rows = Vec::new();
    for &i in members {
        let neg = build_negative_sequence(&batch[i])
            .ok_or_else(|| Error::Data(format!("sequence {i} is too short for a counterpart")))?;
        negatives.push(neg);
        let (s, l) = fwd.spans[i];
        rows.extend(s..s + l);
    }
    let spans = spans_of(&negatives);
    let ids = TokenIds::from_sequences(&negatives);
    let m = GaussianVars { mean: g.gather_rows(fwd.kc_side.mean, &rows)?, cov: g.gather_rows(fwd.kc_side.cov, &rows)? };
    let e = embed_values(g, pv, &ids, variant.use_stochastic)?;
    run_blocks(g, pv, cfg, variant, m, e, &spans, true, dropout)
}

/// Loss terms of one batch.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub total: Var,
    pub prediction: Var,
    pub contrastive: Option<Var>,
    pub forward: ForwardVars,
}

/// Full objective for a batch. The counterpart pass runs only when the
/// effective contrastive weight is positive and at least two sequences
/// qualify.
pub fn batch_loss(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    variant: &VariantConfig,
    batch: &[StudentSequence],
    dropout: &mut Dropout<'_>,
) -> Result<LossVars> {
    let fwd = forward_graph(g, pv, cfg, variant, batch, dropout)?;
    let rows = fwd.predicted_rows();
    let targets: Vec<f64> = batch.iter().flat_map(|s| s.interactions[1..].iter().map(|it| it.response as f64)).collect();
    let prediction = bce_loss_graph(g, fwd.logits, &rows, &targets, variant.reduction)?;
    let lambda = variant.effective_lambda();
    let mut contrastive = None;
    if lambda > 0.0 {
        let members: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].len() >= 2).collect();
        if members.len() >= 2 {
            let neg = negative_pooled_graph(g, pv, cfg, variant, batch, &fwd, &members, dropout)?;
            let anchors = GaussianVars {
                mean: g.gather_rows(fwd.pooled.mean, &members)?,
                cov: g.gather_rows(fwd.pooled.cov, &members)?,
            };
            contrastive =
                Some(contrastive_loss_graph(g, anchors, neg, variant.cl_convention, variant.distance_cap)?);
        } else {
            log::warn!("contrastive term skipped: batch has {} eligible sequences", members.len());
        }
    }
    let total = total_loss_graph(g, prediction, contrastive, lambda)?;
    Ok(LossVars { total, prediction, contrastive, forward: fwd })
}

/// Compares backpropagated gradients of the batch objective with central
/// differences for every parameter tensor. Dropout is off.
pub fn check_gradients(
    params: &ModelParams,
    variant: &VariantConfig,
    batch: &[StudentSequence],
    cfg: GradCheckConfig,
) -> Result<CheckReport> {
    let blocks = params.blocks.len();
    let to_tensor = |e: Error| match e {
        Error::Tensor(t) => t,
        other => TensorError::Usage(other.to_string()),
    };
    let report = finite_diff_check(
        |g, vars| {
            let pv = ParamVars::from_slice(vars, blocks).map_err(to_tensor)?;
            let loss = batch_loss(g, &pv, &params.config, variant, batch, &mut Dropout::off()).map_err(to_tensor)?;
            Ok(loss.total)
        },
        &params.named(),
        cfg,
    )?;
    Ok(report)
}

/// A two-sequence, length-5 batch and a small randomly initialised model for
/// gradient verification. Biases are drawn nonzero so that no activation
/// sits exactly on a ReLU kink.
pub fn gradient_fixture(seed: u64, blocks: usize) -> Result<(ModelParams, Vec<StudentSequence>)> {
    let config = ModelConfig { d: 4, heads: 2, blocks, max_len: 5, ..ModelConfig::new(4, 6) };
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut params = ModelParams::init_with(&config, &mut rng)?;
    for b in &mut params.blocks {
        for t in [&mut b.b1, &mut b.b2, &mut b.b3, &mut b.b4] {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.2..0.2));
        }
    }
    params.head_b.data_mut()[0] = rng.random_range(-0.2..0.2);
    let mut batch = Vec::with_capacity(2);
    for student in 0..2 {
        let interactions = (0..5)
            .map(|t| {
                let kc = rng.random_range(1..4);
                let q = rng.random_range(1..6);
                Interaction::new(q, [kc], rng.random_range(0..2), t)
            })
            .collect::<Result<Vec<_>>>()?;
        batch.push(StudentSequence { student_id: student, interactions });
    }
    Ok((params, batch))
}

/// Forward results for plain (non-graph) callers.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Per sequence, one logit per position. Position 0 is not a prediction.
    pub logits: Vec<Vec<f64>>,
    /// Per sequence, refined states.
    pub states: Vec<GaussianSeq>,
    /// Last-position state of every sequence, one row each.
    pub pooled: GaussianSeq,
}

impl ForwardOutput {
    /// Number of scored positions.
    pub fn predicted_positions(&self) -> usize {
        self.logits.iter().map(|l| l.len().saturating_sub(1)).sum()
    }
}

/// Inference forward pass without dropout.
pub fn forward(batch: &[StudentSequence], params: &ModelParams, variant: &VariantConfig) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let fwd = forward_graph(&mut g, &pv, &params.config, variant, batch, &mut Dropout::off())?;
    let d = params.config.d;
    let logits = g.value(fwd.logits).data();
    let mean = g.value(fwd.states.mean).data();
    let cov = g.value(fwd.states.cov).data();
    let mut out_logits = Vec::with_capacity(batch.len());
    let mut states = Vec::with_capacity(batch.len());
    for &(s, l) in &fwd.spans {
        out_logits.push(logits[s..s + l].to_vec());
        states.push(GaussianSeq {
            mean: Tensor::new(vec![l, d], mean[s * d..(s + l) * d].to_vec())?,
            cov: Tensor::new(vec![l, d], cov[s * d..(s + l) * d].to_vec())?,
            mask: vec![true; l],
        });
    }
    Ok(ForwardOutput { logits: out_logits, states, pooled: GaussianSeq::from_graph(&g, fwd.pooled) })
}

/// One refinement block applied to plain sequences.
pub fn ffn_refine(h: &GaussianSeq, m: &GaussianSeq, block: &FfnBlock) -> Result<GaussianSeq> {
    let mut g = Graph::new();
    let bv = bind_block(&mut g, block);
    let hv = GaussianVars { mean: g.constant(h.mean.clone()), cov: g.constant(h.cov.clone()) };
    let mv = GaussianVars { mean: g.constant(m.mean.clone()), cov: g.constant(m.cov.clone()) };
    let out = ffn_refine_graph(&mut g, &bv, hv, mv, true, &mut Dropout::off())?;
    let mut seq = GaussianSeq::from_graph(&g, out);
    seq.mask = h.mask.clone();
    Ok(seq)
}

fn bind_block(g: &mut Graph, b: &FfnBlock) -> BlockVars {
    let [w1, b1, w2, b2, w3, b3, w4, b4] = b.tensors().map(|t| g.constant(t.clone()));
    BlockVars { w1, b1, w2, b2, w3, b3, w4, b4 }
}

/// Logit of one refined state.
pub fn predict_logit(h_mean: &[f64], h_cov: &[f64], params: &ModelParams) -> Result<f64> {
    let d = params.config.d;
    if h_mean.len() != d || h_cov.len() != d {
        return Err(TensorError::Dimension { op: "predict_logit", detail: format!("state of {} + {}", h_mean.len(), h_cov.len()) }.into());
    }
    let w = params.head_w.data();
    let eta: f64 = h_mean.iter().chain(h_cov).zip(w).map(|(x, w)| x.max(0.0) * w).sum();
    Ok(eta + params.head_b.data()[0])
}

/// Cross-entropy over the unmasked positions of one sequence, excluding
/// position 0.
pub fn bce_loss(logits: &[f64], responses: &[u8], mask: &[bool], reduction: Reduction) -> Result<f64> {
    if logits.len() != responses.len() || logits.len() != mask.len() {
        return Err(TensorError::Dimension {
            op: "bce_loss",
            detail: format!("{} logits, {} responses, {} mask", logits.len(), responses.len(), mask.len()),
        }
        .into());
    }
    let rows: Vec<usize> = (1..logits.len()).filter(|&t| mask[t]).collect();
    let targets: Vec<f64> = rows.iter().map(|&t| responses[t] as f64).collect();
    let mut g = Graph::new();
    let l = g.constant(Tensor::new(vec![logits.len(), 1], logits.to_vec())?);
    let loss = bce_loss_graph(&mut g, l, &rows, &targets, reduction)?;
    Ok(g.value(loss).item()?)
}

/// Contrastive loss from precomputed squared distances: `positive[i]` to
/// anchor `i`'s counterpart and `pairwise[i][j]` between anchors.
pub fn contrastive_loss_from_distances(
    positive: &[f64],
    pairwise: &[Vec<f64>],
    convention: ClConvention,
    cap: f64,
) -> Result<f64> {
    let b = positive.len();
    if b < 2 || pairwise.len() != b || pairwise.iter().any(|r| r.len() != b) {
        return Err(Error::Evaluation(format!("need a {b}x{b} distance matrix with at least two anchors")));
    }
    let mut total = 0.0;
    for i in 0..b {
        let s = match convention {
            ClConvention::Paper => positive[i].min(cap),
            ClConvention::Infonce => -positive[i].min(cap),
        };
        let others: f64 = (0..b).filter(|&j| j != i).map(|j| (-pairwise[i][j].min(cap)).exp()).sum();
        total += (s.exp() + others).ln() - s;
    }
    Ok(total / b as f64)
}

/// Contrastive loss of plain pooled states (one row per anchor).
pub fn contrastive_loss(anchors: &GaussianSeq, negatives: &GaussianSeq, convention: ClConvention, cap: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = GaussianVars { mean: g.constant(anchors.mean.clone()), cov: g.constant(anchors.cov.clone()) };
    let n = GaussianVars { mean: g.constant(negatives.mean.clone()), cov: g.constant(negatives.cov.clone()) };
    let l = contrastive_loss_graph(&mut g, a, n, convention, cap)?;
    Ok(g.value(l).item()?)
}

/// `prediction + lambda * contrastive`.
pub fn total_loss(prediction: f64, contrastive: Option<f64>, lambda: f64) -> f64 {
    match contrastive {
        Some(c) if lambda > 0.0 => prediction + lambda * c,
        _ => prediction,
    }
}
