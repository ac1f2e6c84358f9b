//! The analysis experiments: contrastive-weight sweep, covariance heatmaps,
//! response-noise stress test and ablations. Each emits a headered CSV.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::{auc, csv_error, evaluate, predict, train_fold, EvalReport, TrainConfig};
use crate::data::{DatasetBundle, FoldPlan, StudentSequence};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Variant, VariantConfig};

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Which copies of a flipped response are corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScope {
    /// Only the targets being scored.
    Labels,
    /// Only the responses the model reads as history.
    History,
    /// Both: the observed response itself is wrong.
    Both,
}

impl FromStr for NoiseScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labels" => Ok(Self::Labels),
            "history" => Ok(Self::History),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!("unknown noise scope `{s}`"))),
        }
    }
}

/// Flips each response independently with probability `rate`. Returns the
/// model inputs and the scoring targets.
pub fn inject_noise(
    seqs: &[StudentSequence],
    rate: f64,
    scope: NoiseScope,
    seed: u64,
) -> Result<(Vec<StudentSequence>, Vec<Vec<u8>>)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("noise rate {rate} outside [0, 1]")));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut labels = Vec::with_capacity(seqs.len());
    for s in seqs {
        let clean = s.responses();
        let flipped: Vec<u8> = clean.iter().map(|&r| if rng.random::<f64>() < rate { 1 - r } else { r }).collect();
        let (inp, lab) = match scope {
            NoiseScope::Labels => (clean, flipped),
            NoiseScope::History => (flipped, clean),
            NoiseScope::Both => (flipped.clone(), flipped),
        };
        inputs.push(s.with_responses(&inp));
        labels.push(lab);
    }
    Ok((inputs, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StressRow {
    pub variant: String,
    pub clean_auc: f64,
    pub noisy_auc: f64,
    /// `clean_auc - noisy_auc`.
    pub degradation: f64,
    /// Degradation as a percentage of the clean AUC.
    pub relative_pct: f64,
}

/// Evaluates each model on clean and on noised copies of `clean`.
pub fn aleatory_stress_eval(
    models: &[(String, &ModelParams, VariantConfig)],
    clean: &[StudentSequence],
    noise_rate: f64,
    scope: NoiseScope,
    seed: u64,
) -> Result<Vec<StressRow>> {
    let (inputs, labels) = inject_noise(clean, noise_rate, scope, seed)?;
    models
        .iter()
        .map(|(name, params, variant)| {
            let clean_auc = evaluate(params, variant, clean, 0.5)?.auc;
            let p = predict(params, variant, &inputs, Some(&labels))?;
            let noisy_auc = auc(&p.probs, &p.labels)?;
            let degradation = clean_auc - noisy_auc;
            Ok(StressRow {
                variant: name.clone(),
                clean_auc,
                noisy_auc,
                degradation,
                relative_pct: 100.0 * degradation / clean_auc,
            })
        })
        .collect()
}

pub fn write_stress_csv(rows: &[StressRow], noise_rate: f64, path: impl AsRef<Path>) -> Result<()> {
    let rows = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                noise_rate.to_string(),
                r.clean_auc.to_string(),
                r.noisy_auc.to_string(),
                r.degradation.to_string(),
                r.relative_pct.to_string(),
            ]
        })
        .collect();
    write_rows(
        path.as_ref(),
        &["variant", "noise_rate", "clean_auc", "noisy_auc", "degradation", "relative_pct"],
        rows,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean_auc: f64,
    pub std_auc: f64,
    /// Test AUC of each fold's model.
    pub fold_aucs: Vec<f64>,
}

/// Trains one model per fold and per contrastive weight, early-stopping on
/// the fold's validation students, and scores each on the test students.
pub fn lambda_sweep(
    bundle: &DatasetBundle,
    plan: &FoldPlan,
    model: &ModelConfig,
    cfg: &TrainConfig,
    variant: &VariantConfig,
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    let test = plan.test_sequences(bundle);
    grid.iter()
        .map(|&lambda| {
            let v = VariantConfig { lambda, ..*variant };
            let fold_aucs = (0..plan.k())
                .map(|f| {
                    let out = train_fold(bundle, plan, f, model, cfg, &v)?;
                    Ok(evaluate(&out.params, &v, &test, 0.5)?.auc)
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean_auc, std_auc) = mean_std(&fold_aucs);
            log::info!("lambda {lambda}: auc {mean_auc:.4} +- {std_auc:.4}");
            Ok(SweepRow { lambda, mean_auc, std_auc, fold_aucs })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let rows = rows
        .iter()
        .map(|r| vec![r.lambda.to_string(), r.mean_auc.to_string(), r.std_auc.to_string(), r.fold_aucs.len().to_string()])
        .collect();
    write_rows(path.as_ref(), &["lambda", "mean_auc", "std_auc", "folds"], rows)
}

/// Columns of the covariance heatmap file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeatmapLayout {
    /// One column per feature dimension.
    PerDim,
    /// A single column with the mean over dimensions.
    Scalar,
}

impl FromStr for HeatmapLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-dim" => Ok(Self::PerDim),
            "scalar" => Ok(Self::Scalar),
            _ => Err(Error::Config(format!("unknown heatmap layout `{s}`"))),
        }
    }
}

/// Refined covariance of each sequence averaged over its positions: one row
/// per sequence, `(student id, values)`.
pub fn covariance_heatmap(
    params: &ModelParams,
    variant: &VariantConfig,
    seqs: &[StudentSequence],
    layout: HeatmapLayout,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let p = predict(params, variant, seqs, None)?;
    Ok(p.per_sequence_cov_mean
        .iter()
        .zip(p.per_sequence_cov)
        .map(|(&(id, mean), dims)| match layout {
            HeatmapLayout::PerDim => (id, dims),
            HeatmapLayout::Scalar => (id, vec![mean]),
        })
        .collect())
}

pub fn export_covariance_heatmap(
    params: &ModelParams,
    variant: &VariantConfig,
    seqs: &[StudentSequence],
    path: impl AsRef<Path>,
    layout: HeatmapLayout,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let rows = covariance_heatmap(params, variant, seqs, layout)?;
    let width = rows.first().map(|r| r.1.len()).unwrap_or(0);
    let mut header = vec!["sequence".to_string(), "student_id".to_string()];
    match layout {
        HeatmapLayout::PerDim => header.extend((0..width).map(|k| format!("dim{k}"))),
        HeatmapLayout::Scalar => header.push("cov_mean".into()),
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let body = rows
        .iter()
        .enumerate()
        .map(|(i, (id, vals))| {
            let mut r = vec![i.to_string(), id.to_string()];
            r.extend(vals.iter().map(|v| v.to_string()));
            r
        })
        .collect();
    write_rows(path.as_ref(), &header_refs, body)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_acc: f64,
}

/// Trains the full model and each single-switch ablation on the folds and
/// reports test metrics.
pub fn ablation(
    bundle: &DatasetBundle,
    plan: &FoldPlan,
    model: &ModelConfig,
    cfg: &TrainConfig,
    base: &VariantConfig,
) -> Result<Vec<AblationRow>> {
    let test = plan.test_sequences(bundle);
    Variant::ALL
        .iter()
        .map(|&variant| {
            let v = variant.apply(*base);
            let reports = (0..plan.k())
                .map(|f| {
                    let out = train_fold(bundle, plan, f, model, cfg, &v)?;
                    evaluate(&out.params, &v, &test, 0.5)
                })
                .collect::<Result<Vec<EvalReport>>>()?;
            let aucs: Vec<f64> = reports.iter().map(|r| r.auc).collect();
            let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
            let (mean_auc, std_auc) = mean_std(&aucs);
            Ok(AblationRow { variant, mean_auc, std_auc, mean_acc: mean_std(&accs).0 })
        })
        .collect()
}

pub fn write_ablation_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let rows = rows
        .iter()
        .map(|r| {
            vec![r.variant.label().to_string(), r.mean_auc.to_string(), r.std_auc.to_string(), r.mean_acc.to_string()]
        })
        .collect();
    write_rows(path.as_ref(), &["model", "auc_mean", "auc_std", "acc_mean"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;

    fn seqs(n: usize) -> Vec<StudentSequence> {
        (0..n)
            .map(|s| StudentSequence {
                student_id: s,
                interactions: (0..20).map(|t| Interaction::new(1, [1], ((s * 7 + t * 3) % 5 < 2) as u8, t).unwrap()).collect(),
            })
            .collect()
    }

    #[test]
    fn noise_rates_and_scopes() {
        let clean = seqs(4);
        let (inp, lab) = inject_noise(&clean, 0.0, NoiseScope::Both, 1).unwrap();
        assert_eq!(inp, clean);
        assert_eq!(lab, clean.iter().map(|s| s.responses()).collect::<Vec<_>>());
        let (inp, lab) = inject_noise(&clean, 1.0, NoiseScope::Labels, 1).unwrap();
        assert_eq!(inp, clean);
        assert!(lab.iter().zip(&clean).all(|(l, s)| l.iter().zip(s.responses()).all(|(a, b)| *a == 1 - b)));
        let (inp, lab) = inject_noise(&clean, 1.0, NoiseScope::History, 1).unwrap();
        assert_eq!(lab[0], clean[0].responses());
        assert_ne!(inp[0], clean[0]);
        assert!(inject_noise(&clean, 1.5, NoiseScope::Both, 1).is_err());
    }

    #[test]
    fn summary_statistics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
