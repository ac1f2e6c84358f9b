//! Optimisation, evaluation and the analysis experiments.

mod experiments;
mod metrics;

pub use experiments::*;
pub use metrics::{accuracy, auc};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, FoldPlan, StudentSequence};
use crate::error::{Error, Result};
use crate::model::{batch_loss, forward_graph, Dropout, ModelConfig, ModelParams, VariantConfig};
use crate::tensor::{sigmoid, Graph, Tensor};

/// Optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without a validation AUC improvement before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop as soon as the training-set AUC reaches this value.
    pub stop_at_train_auc: Option<f64>,
    /// Evaluate the training set after every epoch.
    pub track_train_auc: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            patience: 10,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
            stop_at_train_auc: None,
            track_train_auc: false,
        }
    }
}

pub const LEARNING_RATE_GRID: [f64; 3] = [1e-3, 1e-4, 1e-5];
pub const DROPOUT_GRID: [f64; 4] = [0.05, 0.1, 0.3, 0.5];
pub const DIM_GRID: [usize; 4] = [64, 128, 256, 512];
pub const BLOCK_GRID: [usize; 3] = [1, 2, 4];
pub const HEAD_GRID: [usize; 2] = [4, 8];
pub const LAMBDA_GRID: [f64; 7] = [0.01, 0.02, 0.05, 0.07, 0.1, 0.5, 1.0];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }

    /// Settings that fall outside the tuning grids, one message each.
    pub fn off_grid(&self, model: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        if !LEARNING_RATE_GRID.contains(&self.learning_rate) {
            out.push(format!("learning rate {} not in {:?}", self.learning_rate, LEARNING_RATE_GRID));
        }
        if model.dropout != 0.0 && !DROPOUT_GRID.contains(&model.dropout) {
            out.push(format!("dropout {} not in {:?}", model.dropout, DROPOUT_GRID));
        }
        if !DIM_GRID.contains(&model.d) {
            out.push(format!("dimension {} not in {:?}", model.d, DIM_GRID));
        }
        if !BLOCK_GRID.contains(&model.blocks) {
            out.push(format!("{} blocks not in {:?}", model.blocks, BLOCK_GRID));
        }
        if !HEAD_GRID.contains(&model.heads) {
            out.push(format!("{} heads not in {:?}", model.heads, HEAD_GRID));
        }
        out
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Config(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::Config(format!("parameter {i} changed size")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (x, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *x -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Model outputs at every scored position of a sequence set.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub probs: Vec<f64>,
    pub labels: Vec<u8>,
    /// `(student id, mean of the refined covariance over positions and dims)`.
    pub per_sequence_cov_mean: Vec<(usize, f64)>,
    /// Per sequence, the refined covariance averaged over positions.
    pub per_sequence_cov: Vec<Vec<f64>>,
}

const EVAL_BATCH: usize = 64;

/// Runs the model over `seqs` without dropout. `labels`, when given,
/// replaces the responses used as targets (inputs are unchanged).
pub fn predict(
    params: &ModelParams,
    variant: &VariantConfig,
    seqs: &[StudentSequence],
    labels: Option<&[Vec<u8>]>,
) -> Result<Predictions> {
    if let Some(l) = labels {
        if l.len() != seqs.len() || l.iter().zip(seqs).any(|(a, s)| a.len() != s.len()) {
            return Err(Error::Evaluation("label override does not match the sequences".into()));
        }
    }
    let d = params.config.d;
    let mut out = Predictions {
        probs: Vec::new(),
        labels: Vec::new(),
        per_sequence_cov_mean: Vec::with_capacity(seqs.len()),
        per_sequence_cov: Vec::with_capacity(seqs.len()),
    };
    for (c, chunk) in seqs.chunks(EVAL_BATCH).enumerate() {
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let fwd = forward_graph(&mut g, &pv, &params.config, variant, chunk, &mut Dropout::off())?;
        let logits = g.value(fwd.logits).data();
        let cov = g.value(fwd.states.cov).data();
        for (i, (s, &(start, len))) in chunk.iter().zip(&fwd.spans).enumerate() {
            let targets = match labels {
                Some(l) => l[c * EVAL_BATCH + i].clone(),
                None => s.responses(),
            };
            for t in 1..len {
                out.probs.push(sigmoid(logits[start + t]));
                out.labels.push(targets[t]);
            }
            let mut per_dim = vec![0.0; d];
            for t in 0..len {
                for (acc, &x) in per_dim.iter_mut().zip(&cov[(start + t) * d..(start + t + 1) * d]) {
                    *acc += x;
                }
            }
            per_dim.iter_mut().for_each(|x| *x /= len as f64);
            let mean = per_dim.iter().sum::<f64>() / d as f64;
            out.per_sequence_cov_mean.push((s.student_id, mean));
            out.per_sequence_cov.push(per_dim);
        }
    }
    Ok(out)
}

/// Metrics of a model on a sequence set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub accuracy: f64,
    /// Mean cross-entropy over scored positions.
    pub loss: f64,
    /// Training loss per epoch, when produced by [`train`].
    pub loss_trace: Vec<f64>,
    pub per_sequence_cov_mean: Vec<(usize, f64)>,
    pub num_predictions: usize,
}

impl EvalReport {
    fn from_predictions(p: &Predictions, threshold: f64) -> Result<Self> {
        let loss = p
            .probs
            .iter()
            .zip(&p.labels)
            .map(|(&q, &y)| {
                let q = q.clamp(1e-15, 1.0 - 1e-15);
                if y == 1 {
                    -q.ln()
                } else {
                    -(1.0 - q).ln()
                }
            })
            .sum::<f64>()
            / p.probs.len().max(1) as f64;
        Ok(Self {
            auc: auc(&p.probs, &p.labels)?,
            accuracy: accuracy(&p.probs, &p.labels, threshold)?,
            loss,
            loss_trace: Vec::new(),
            per_sequence_cov_mean: p.per_sequence_cov_mean.clone(),
            num_predictions: p.probs.len(),
        })
    }
}

/// AUC and accuracy over every scored position of `seqs`, pooled.
pub fn evaluate(params: &ModelParams, variant: &VariantConfig, seqs: &[StudentSequence], threshold: f64) -> Result<EvalReport> {
    let p = predict(params, variant, seqs, None)?;
    EvalReport::from_predictions(&p, threshold)
}

/// One row of the per-epoch metrics file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_acc: f64,
    pub train_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last epoch when there is
    /// no validation set).
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    /// Metrics of the returned parameters on the validation set, or on the
    /// training set when there is none.
    pub report: EvalReport,
}

fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(|c| c.to_vec()).collect();
    // a trailing single sequence has no contrastive partner
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

/// Trains a fresh model on `train_seqs`, early-stopping on the AUC of
/// `valid_seqs`. Fully determined by the configs.
pub fn train(
    train_seqs: &[StudentSequence],
    valid_seqs: &[StudentSequence],
    model: &ModelConfig,
    cfg: &TrainConfig,
    variant: &VariantConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    variant.validate()?;
    model.validate()?;
    if train_seqs.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut params = ModelParams::init(model, cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut shuffle_rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut dropout_rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0xd1b5_4a32_d192_ed03);
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    let mut step = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let plan = batches(&order, cfg.batch_size);
        for idx in &plan {
            let batch: Vec<StudentSequence> = idx.iter().map(|&i| train_seqs[i].clone()).collect();
            let mut g = Graph::new();
            let pv = params.bind(&mut g, true);
            let mut dropout = Dropout::new(model.dropout, &mut dropout_rng);
            let loss = batch_loss(&mut g, &pv, model, variant, &batch, &mut dropout)?;
            let value = g.value(loss.total).item()?;
            step += 1;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: value });
            }
            g.backward(loss.total)?;
            let vars = pv.all();
            let grads: Vec<&Tensor> = vars.iter().map(|&v| g.grad(v).expect("tracked parameter")).collect();
            if let Some(bad) = grads.iter().position(|t| !t.all_finite()) {
                log::error!("non-finite gradient in {}", params.names()[bad]);
                return Err(Error::Divergence { epoch, step, loss: value });
            }
            adam.step(&mut params.tensors_mut(), &grads)?;
            loss_sum += value;
        }
        let train_loss = loss_sum / plan.len() as f64;

        let train_auc = if cfg.track_train_auc || cfg.stop_at_train_auc.is_some() {
            Some(evaluate(&params, variant, train_seqs, 0.5)?.auc)
        } else {
            None
        };
        let (val_auc, val_acc) = if valid_seqs.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let r = evaluate(&params, variant, valid_seqs, 0.5)?;
            (r.auc, r.accuracy)
        };
        log::info!(
            "epoch {epoch}: loss {train_loss:.5} val_auc {val_auc:.4} val_acc {val_acc:.4}{}",
            train_auc.map(|a| format!(" train_auc {a:.4}")).unwrap_or_default()
        );
        history.push(EpochRecord { epoch, train_loss, val_auc, val_acc, train_auc });

        if !valid_seqs.is_empty() {
            if best.as_ref().is_none_or(|(b, _, _)| val_auc > *b) {
                best = Some((val_auc, epoch, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        if cfg.stop_at_train_auc.is_some_and(|t| train_auc.is_some_and(|a| a >= t)) {
            log::info!("training AUC target reached at epoch {epoch}");
            break;
        }
        if !valid_seqs.is_empty() && since_best >= cfg.patience {
            log::info!("early stop at epoch {epoch}");
            break;
        }
    }

    let loss_trace: Vec<f64> = history.iter().map(|h| h.train_loss).collect();
    let (best_val_auc, best_epoch, params) = match best {
        Some(b) => b,
        None => (f64::NAN, history.len(), params),
    };
    let eval_set = if valid_seqs.is_empty() { train_seqs } else { valid_seqs };
    let mut report = evaluate(&params, variant, eval_set, 0.5)?;
    report.loss_trace = loss_trace;
    Ok(TrainOutcome { params, history, best_epoch, best_val_auc, report })
}

/// Trains on fold `fold` of `plan`: the other folds train, `fold` validates.
pub fn train_fold(
    bundle: &DatasetBundle,
    plan: &FoldPlan,
    fold: usize,
    model: &ModelConfig,
    cfg: &TrainConfig,
    variant: &VariantConfig,
) -> Result<TrainOutcome> {
    if fold >= plan.k() {
        return Err(Error::Config(format!("fold {fold} of {}", plan.k())));
    }
    let (train_seqs, valid_seqs) = plan.fold_sequences(bundle, fold);
    train(&train_seqs, &valid_seqs, model, cfg, variant)
}

/// Writes `epoch,train_loss,val_auc,val_acc[,train_auc]` rows.
pub fn write_metrics_csv(history: &[EpochRecord], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let with_train = history.iter().any(|h| h.train_auc.is_some());
    let mut header = vec!["epoch", "train_loss", "val_auc", "val_acc"];
    if with_train {
        header.push("train_auc");
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for h in history {
        let mut row = vec![h.epoch.to_string(), h.train_loss.to_string(), h.val_auc.to_string(), h.val_acc.to_string()];
        if with_train {
            row.push(h.train_auc.map(|a| a.to_string()).unwrap_or_default());
        }
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &std::path::Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}
