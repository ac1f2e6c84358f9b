//! Attention over diagonal Gaussian tokens.
//!
//! Scores are negative squared 2-Wasserstein distances between the query
//! and each earlier key, divided by a temperature. For diagonal covariances
//!
//! ```text
//! W2^2 = |mu1 - mu2|^2 + sum_i (sqrt(cov1_i) - sqrt(cov2_i))^2
//! ```
//!
//! Softmax weights then mix the value means and the value covariances. The
//! mixture of covariances is convex, so positive inputs stay positive.

use serde::{Deserialize, Serialize};

use crate::embedding::{GaussianSeq, GaussianVars};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Squared 2-Wasserstein distance between two diagonal Gaussians.
pub fn w2_sq_diag(mu1: &[f64], cov1: &[f64], mu2: &[f64], cov2: &[f64]) -> Result<f64> {
    let d = mu1.len();
    if cov1.len() != d || mu2.len() != d || cov2.len() != d {
        return Err(TensorError::Dimension {
            op: "w2_sq_diag",
            detail: format!("lengths {}, {}, {}, {}", d, cov1.len(), mu2.len(), cov2.len()),
        }
        .into());
    }
    if let Some(c) = cov1.iter().chain(cov2).find(|&&c| c <= 0.0 || c.is_nan()) {
        return Err(TensorError::Domain { op: "w2_sq_diag", detail: format!("covariance entry {c}") }.into());
    }
    let mut total = 0.0;
    for i in 0..d {
        let dm = mu1[i] - mu2[i];
        let ds = cov1[i].sqrt() - cov2[i].sqrt();
        total += dm * dm + ds * ds;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    /// Negative squared Wasserstein distance.
    Wasserstein,
    /// Scaled dot product of the means only.
    DotProduct,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Score divisor.
    pub scale: f64,
    /// Queries see strictly earlier positions only.
    pub causal: bool,
}

impl AttentionConfig {
    /// `heads` attention heads over `d` features with the default `sqrt(d)` scale.
    pub fn new(d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide dimension {d}")));
        }
        Ok(Self { heads, scale: (d as f64).sqrt(), causal: true })
    }

    pub fn head_dim(&self, d: usize) -> usize {
        d / self.heads
    }
}

/// Per-head scores of one query against `keys[..context]`. Positions at or
/// beyond `context` and padded keys hold `-inf`.
pub fn attention_scores(
    query_mean: &[f64],
    query_cov: &[f64],
    keys: &GaussianSeq,
    context: usize,
    cfg: &AttentionConfig,
) -> Result<Vec<Vec<f64>>> {
    let d = query_mean.len();
    if d % cfg.heads != 0 {
        return Err(Error::Config(format!("{} heads do not divide dimension {d}", cfg.heads)));
    }
    let hd = cfg.head_dim(d);
    let visible: Vec<bool> = (0..keys.len()).map(|j| j < context && keys.mask[j]).collect();
    if !visible.iter().any(|&v| v) {
        return Err(Error::Evaluation("empty attention context".into()));
    }
    let mut out = vec![vec![f64::NEG_INFINITY; keys.len()]; cfg.heads];
    for (h, row) in out.iter_mut().enumerate() {
        let cols = h * hd..(h + 1) * hd;
        for j in (0..keys.len()).filter(|&j| visible[j]) {
            let km = &keys.mean.row(j)[cols.clone()];
            let kc = &keys.cov.row(j)[cols.clone()];
            row[j] = -w2_sq_diag(&query_mean[cols.clone()], &query_cov[cols.clone()], km, kc)? / cfg.scale;
        }
    }
    Ok(out)
}

/// Options for one sequence's attention pass.
#[derive(Debug, Clone, Copy)]
pub struct SegmentOptions<'a> {
    pub kind: ScoreKind,
    /// Position of the first query row (queries may be a suffix of the keys).
    pub query_offset: usize,
    /// `true`: query `t` sees keys `j < t`; `false`: keys `j <= t`.
    pub strict: bool,
    /// Dropped attention links, row-major `queries x keys`.
    pub dropped: Option<&'a [bool]>,
}

/// Attention for one sequence on a graph.
///
/// `query` holds `Tq` rows for positions `query_offset..query_offset + Tq`;
/// `key` and `value` hold all `T` positions. A query with no visible key
/// returns the neutral state (zero mean, unit covariance).
pub fn attend_graph(
    g: &mut Graph,
    query: GaussianVars,
    key: GaussianVars,
    value: GaussianVars,
    cfg: &AttentionConfig,
    opts: SegmentOptions<'_>,
) -> Result<GaussianVars> {
    let (tq, d) = g.value(query.mean).dims2().ok_or_else(|| Error::Config("query must be a matrix".into()))?;
    let (tk, dk) = g.value(key.mean).dims2().ok_or_else(|| Error::Config("keys must be a matrix".into()))?;
    if d != dk || g.shape(value.mean) != [tk, d] || g.shape(value.cov) != [tk, d] {
        return Err(Error::Config(format!(
            "misaligned attention inputs: query {:?}, key {:?}, value {:?}",
            g.shape(query.mean),
            g.shape(key.mean),
            g.shape(value.mean)
        )));
    }
    if d % cfg.heads != 0 {
        return Err(Error::Config(format!("{} heads do not divide dimension {d}", cfg.heads)));
    }
    let mut keep = vec![false; tq * tk];
    let mut empty = vec![false; tq];
    for i in 0..tq {
        let t = opts.query_offset + i;
        let limit = if opts.strict { t } else { t + 1 }.min(tk);
        let row = &mut keep[i * tk..(i + 1) * tk];
        for (j, k) in row.iter_mut().enumerate().take(limit) {
            *k = opts.dropped.is_none_or(|dr| !dr[i * tk + j]);
        }
        if limit > 0 && !row.iter().any(|&k| k) {
            // every visible link was dropped: keep them all
            row[..limit].iter_mut().for_each(|k| *k = true);
        }
        empty[i] = limit == 0;
    }

    let hd = cfg.head_dim(d);
    let (q_sd, k_sd) = match opts.kind {
        ScoreKind::Wasserstein => (Some(g.sqrt(query.cov)?), Some(g.sqrt(key.cov)?)),
        ScoreKind::DotProduct => (None, None),
    };
    let cols = |g: &mut Graph, v: Var, h: usize| -> Result<Var> {
        if cfg.heads == 1 {
            Ok(v)
        } else {
            Ok(g.slice_cols(v, h * hd, hd)?)
        }
    };
    let mut mean_heads = Vec::with_capacity(cfg.heads);
    let mut cov_heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qm = cols(g, query.mean, h)?;
        let km = cols(g, key.mean, h)?;
        let raw = match opts.kind {
            ScoreKind::Wasserstein => {
                let qs = cols(g, q_sd.unwrap(), h)?;
                let ks = cols(g, k_sd.unwrap(), h)?;
                let dm = g.pairwise_sq_dist(qm, km)?;
                let ds = g.pairwise_sq_dist(qs, ks)?;
                let w2 = g.add(dm, ds)?;
                g.scale(w2, -1.0 / cfg.scale)
            }
            ScoreKind::DotProduct => {
                let kt = g.transpose(km)?;
                let dot = g.matmul(qm, kt)?;
                g.scale(dot, 1.0 / cfg.scale)
            }
        };
        let weights = g.masked_softmax(raw, &keep)?;
        let vm = cols(g, value.mean, h)?;
        let vc = cols(g, value.cov, h)?;
        mean_heads.push(g.matmul(weights, vm)?);
        cov_heads.push(g.matmul(weights, vc)?);
    }
    let (mean, mut cov) = if cfg.heads == 1 {
        (mean_heads[0], cov_heads[0])
    } else {
        (g.concat_cols(&mean_heads)?, g.concat_cols(&cov_heads)?)
    };
    if empty.iter().any(|&e| e) {
        let mut prior = Tensor::zeros(&[tq, d]);
        for (i, _) in empty.iter().enumerate().filter(|(_, &e)| e) {
            prior.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|x| *x = 1.0);
        }
        let p = g.constant(prior);
        cov = g.add(cov, p)?;
    }
    Ok(GaussianVars { mean, cov })
}

/// Strictly causal Wasserstein attention over one sequence: query `t` mixes
/// values `0..t`. Padded keys are ignored.
pub fn attend(queries: &GaussianSeq, keys: &GaussianSeq, values: &GaussianSeq, cfg: &AttentionConfig) -> Result<GaussianSeq> {
    attend_with(queries, keys, values, cfg, ScoreKind::Wasserstein)
}

pub fn attend_with(
    queries: &GaussianSeq,
    keys: &GaussianSeq,
    values: &GaussianSeq,
    cfg: &AttentionConfig,
    kind: ScoreKind,
) -> Result<GaussianSeq> {
    if queries.len() != keys.len() || keys.len() != values.len() {
        return Err(Error::Config(format!(
            "lengths differ: {} queries, {} keys, {} values",
            queries.len(),
            keys.len(),
            values.len()
        )));
    }
    if values.cov.data().iter().any(|&c| c <= 0.0) {
        return Err(TensorError::Domain { op: "attend", detail: "nonpositive value covariance".into() }.into());
    }
    let mut g = Graph::new();
    let q = GaussianVars { mean: g.constant(queries.mean.clone()), cov: g.constant(queries.cov.clone()) };
    let k = GaussianVars { mean: g.constant(keys.mean.clone()), cov: g.constant(keys.cov.clone()) };
    let v = GaussianVars { mean: g.constant(values.mean.clone()), cov: g.constant(values.cov.clone()) };
    let opts = SegmentOptions { kind, query_offset: 0, strict: cfg.causal, dropped: None };
    let out = attend_graph_masked(&mut g, q, k, v, cfg, opts, &keys.mask)?;
    let mut seq = GaussianSeq::from_graph(&g, out);
    seq.mask = queries.mask.clone();
    Ok(seq)
}

/// Like [`attend_graph`], but padded keys never count as visible, even
/// when every other link of a row is dropped.
fn attend_graph_masked(
    g: &mut Graph,
    q: GaussianVars,
    k: GaussianVars,
    v: GaussianVars,
    cfg: &AttentionConfig,
    opts: SegmentOptions<'_>,
    key_mask: &[bool],
) -> Result<GaussianVars> {
    if key_mask.iter().all(|&m| m) {
        return attend_graph(g, q, k, v, cfg, opts);
    }
    // Row by row over the real keys; rows without any fall back to the
    // neutral state.
    let t = key_mask.len();
    let real: Vec<usize> = (0..t).filter(|&j| key_mask[j]).collect();
    let mut rows_out_mean = Vec::with_capacity(t);
    let mut rows_out_cov = Vec::with_capacity(t);
    for i in 0..t {
        let visible: Vec<usize> = real.iter().copied().filter(|&j| if opts.strict { j < i } else { j <= i }).collect();
        let qi = GaussianVars { mean: g.slice_rows(q.mean, i, 1)?, cov: g.slice_rows(q.cov, i, 1)? };
        if visible.is_empty() {
            let zeros = g.constant(Tensor::zeros(&[1, g.shape(q.mean)[1]]));
            let ones = g.constant(Tensor::full(&[1, g.shape(q.mean)[1]], 1.0));
            rows_out_mean.push(zeros);
            rows_out_cov.push(ones);
            continue;
        }
        let kk = GaussianVars { mean: g.gather_rows(k.mean, &visible)?, cov: g.gather_rows(k.cov, &visible)? };
        let vv = GaussianVars { mean: g.gather_rows(v.mean, &visible)?, cov: g.gather_rows(v.cov, &visible)? };
        let o = attend_graph(
            g,
            qi,
            kk,
            vv,
            cfg,
            SegmentOptions { kind: opts.kind, query_offset: visible.len(), strict: true, dropped: None },
        )?;
        rows_out_mean.push(o.mean);
        rows_out_cov.push(o.cov);
    }
    Ok(GaussianVars { mean: g.concat_rows(&rows_out_mean)?, cov: g.concat_rows(&rows_out_cov)? })
}
