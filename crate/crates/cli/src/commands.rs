//! Subcommand bodies. Every output lands in the configured output directory.

use std::path::{Path, PathBuf};

use ukt::data::{
    expand_by_kc, parse_interaction_log, parse_interaction_log_with_vocab, preprocess_sequences, split_folds, write_flat,
    DatasetBundle, FoldPlan, LogFormat, Vocab, Vocabs,
};
use ukt::model::{check_gradients, gradient_fixture, ModelParams};
use ukt::synth::generate_students;
use ukt::tensor::gradcheck::GradCheckConfig;
use ukt::train::{
    ablation, aleatory_stress_eval, evaluate, export_covariance_heatmap, lambda_sweep, train_fold, write_ablation_csv,
    write_metrics_csv, write_stress_csv, write_sweep_csv, EvalReport,
};

use crate::config::RunConfig;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

const CHECKPOINT_NAME: &str = "model.ckpt";
const VOCAB_NAME: &str = "vocab.csv";

fn dataset_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.data.dataset.as_deref().ok_or_else(|| CliError::Usage("no dataset given (use --dataset or [data] dataset)".into()))
}

/// Flat logs start with a `student_id` header; anything else is grouped.
fn detect_format(path: &Path) -> Result<LogFormat> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let first = text.lines().next().unwrap_or("");
    Ok(if first.trim_start().starts_with("student_id") { LogFormat::CsvFlat } else { LogFormat::CsvGrouped })
}

fn pipeline(cfg: &RunConfig, raw: DatasetBundle) -> Result<(DatasetBundle, FoldPlan)> {
    let expanded = if cfg.data.expand_kcs { expand_by_kc(&raw) } else { raw };
    let bundle = preprocess_sequences(&expanded, cfg.data.min_len, cfg.data.max_len)?;
    let plan = split_folds(&bundle, cfg.data.test_fraction, cfg.data.folds, cfg.run.seed)?;
    log::info!(
        "{} sequences, {} interactions, {} KCs, {} questions; {} test students, {} folds",
        bundle.sequences.len(),
        bundle.num_interactions(),
        bundle.num_kcs,
        bundle.num_questions,
        plan.test.len(),
        plan.k()
    );
    Ok((bundle, plan))
}

/// Parses the dataset with fresh ids and applies the preprocessing pipeline.
fn load(cfg: &RunConfig) -> Result<(DatasetBundle, FoldPlan)> {
    let path = dataset_path(cfg)?;
    let format = match cfg.data.format {
        Some(f) => f,
        None => detect_format(path)?,
    };
    pipeline(cfg, parse_interaction_log(path, format)?)
}

/// Parses the dataset against a trained model's vocabulary.
fn load_frozen(cfg: &RunConfig, vocabs: &Vocabs) -> Result<(DatasetBundle, FoldPlan)> {
    let path = dataset_path(cfg)?;
    let format = match cfg.data.format {
        Some(f) => f,
        None => detect_format(path)?,
    };
    pipeline(cfg, parse_interaction_log_with_vocab(path, format, vocabs)?)
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Core(ukt::Error::Data(format!("{}: {e}", path.display())))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// `kind,id,raw` rows for the question and KC vocabularies.
fn write_vocab(vocabs: &Vocabs, path: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for (kind, v) in [("question", &vocabs.questions), ("kc", &vocabs.kcs)] {
        for id in 0..v.len() {
            rows.push(vec![kind.to_string(), id.to_string(), v.name(id).unwrap_or_default().to_string()]);
        }
    }
    write_csv(path, &["kind", "id", "raw"], &rows)
}

fn read_vocab(path: &Path) -> Result<Vocabs> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut vocabs = Vocabs { students: Vocab::default(), questions: Vocab::default(), kcs: Vocab::default() };
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let (kind, id, raw) = (&rec[0], &rec[1], &rec[2]);
        let v = match kind {
            "question" => &mut vocabs.questions,
            "kc" => &mut vocabs.kcs,
            other => return Err(ukt::Error::Data(format!("unknown vocabulary kind `{other}`")).into()),
        };
        if id.parse::<usize>().ok() != Some(v.insert(raw)) {
            return Err(ukt::Error::Data(format!("{}: ids are not dense at `{raw}`", path.display())).into());
        }
    }
    Ok(vocabs)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.experiment.checkpoint.clone().unwrap_or_else(|| cfg.run.out.join(CHECKPOINT_NAME))
}

fn load_model(cfg: &RunConfig) -> Result<(ModelParams, Vocabs)> {
    let ckpt = checkpoint_path(cfg);
    let params = ModelParams::load(&ckpt)?;
    let vocabs = read_vocab(&ckpt.with_file_name(VOCAB_NAME))?;
    if vocabs.kcs.len() != params.config.num_kcs || vocabs.questions.len() != params.config.num_questions {
        return Err(ukt::Error::Data("vocabulary does not match the checkpoint's table sizes".into()).into());
    }
    Ok((params, vocabs))
}

fn report_row(split: &str, r: &EvalReport) -> Vec<String> {
    vec![split.into(), r.auc.to_string(), r.accuracy.to_string(), r.num_predictions.to_string()]
}

const EVAL_HEADER: [&str; 4] = ["split", "auc", "accuracy", "predictions"];

pub fn prepare_data(cfg: &RunConfig) -> Result<()> {
    let (bundle, plan) = load(cfg)?;
    write_flat(&bundle, cfg.run.out.join("prepared.csv"))?;
    let name = |id: usize| bundle.vocabs.students.name(id).unwrap_or_default().to_string();
    let mut rows: Vec<Vec<String>> = plan.test.iter().map(|&s| vec![name(s), "test".into()]).collect();
    for (i, fold) in plan.folds.iter().enumerate() {
        rows.extend(fold.iter().map(|&s| vec![name(s), format!("fold{i}")]));
    }
    write_csv(&cfg.run.out.join("split.csv"), &["student_id", "split"], &rows)
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let bundle = generate_students(&cfg.synth)?;
    let path = cfg.run.out.join("synth.csv");
    write_flat(&bundle, &path)?;
    log::info!("wrote {} interactions to {}", bundle.num_interactions(), path.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let (bundle, plan) = load(cfg)?;
    let model = cfg.model_config(bundle.num_kcs, bundle.num_questions);
    for w in cfg.train.off_grid(&model) {
        log::warn!("{w}");
    }
    let variant = cfg.variant_config();
    let out = train_fold(&bundle, &plan, cfg.run.fold, &model, &cfg.train, &variant)?;
    let dir = &cfg.run.out;
    out.params.save(dir.join(CHECKPOINT_NAME))?;
    write_vocab(&bundle.vocabs, &dir.join(VOCAB_NAME))?;
    write_metrics_csv(&out.history, dir.join("metrics.csv"))?;
    let test = evaluate(&out.params, &variant, &plan.test_sequences(&bundle), cfg.experiment.threshold)?;
    log::info!("best epoch {}: validation AUC {:.4}, test AUC {:.4}", out.best_epoch, out.best_val_auc, test.auc);
    write_csv(&dir.join("eval.csv"), &EVAL_HEADER, &[report_row("validation", &out.report), report_row("test", &test)])
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let (params, vocabs) = load_model(cfg)?;
    let (bundle, plan) = load_frozen(cfg, &vocabs)?;
    let r = evaluate(&params, &cfg.variant_config(), &plan.test_sequences(&bundle), cfg.experiment.threshold)?;
    println!("auc {:.6} accuracy {:.6} predictions {}", r.auc, r.accuracy, r.num_predictions);
    write_csv(&cfg.run.out.join("eval.csv"), &EVAL_HEADER, &[report_row("test", &r)])
}

pub fn sweep_lambda(cfg: &RunConfig) -> Result<()> {
    let (bundle, plan) = load(cfg)?;
    let model = cfg.model_config(bundle.num_kcs, bundle.num_questions);
    let rows = lambda_sweep(&bundle, &plan, &model, &cfg.train, &cfg.variant_config(), &cfg.experiment.lambda_grid)?;
    write_sweep_csv(&rows, cfg.run.out.join("sweep.csv"))?;
    Ok(())
}

pub fn heatmap(cfg: &RunConfig) -> Result<()> {
    let (params, vocabs) = load_model(cfg)?;
    let (bundle, plan) = load_frozen(cfg, &vocabs)?;
    let path = cfg.run.out.join("heatmap.csv");
    let rows = export_covariance_heatmap(
        &params,
        &cfg.variant_config(),
        &plan.test_sequences(&bundle),
        &path,
        cfg.experiment.heatmap_layout,
    )?;
    log::info!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

pub fn stress_eval(cfg: &RunConfig) -> Result<()> {
    let (bundle, plan) = load(cfg)?;
    let model = cfg.model_config(bundle.num_kcs, bundle.num_questions);
    let mut trained = Vec::new();
    for &v in &cfg.experiment.stress_variants {
        let variant = v.apply(cfg.variant);
        let out = train_fold(&bundle, &plan, cfg.run.fold, &model, &cfg.train, &variant)?;
        trained.push((v.label().to_string(), out.params, variant));
    }
    let models: Vec<_> = trained.iter().map(|(n, p, v)| (n.clone(), p, *v)).collect();
    let rows = aleatory_stress_eval(
        &models,
        &plan.test_sequences(&bundle),
        cfg.experiment.noise_rate,
        cfg.experiment.noise_scope,
        cfg.run.seed,
    )?;
    for r in &rows {
        log::info!("{}: clean {:.4} noisy {:.4} ({:+.2}%)", r.variant, r.clean_auc, r.noisy_auc, -r.relative_pct);
    }
    write_stress_csv(&rows, cfg.experiment.noise_rate, cfg.run.out.join("stress.csv"))?;
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let (params, batch) = gradient_fixture(cfg.run.seed, cfg.model.blocks)?;
    let gc = GradCheckConfig::default();
    let report = check_gradients(&params, &cfg.variant_config(), &batch, gc)?;
    let rows: Vec<Vec<String>> =
        report.params.iter().map(|p| vec![p.name.clone(), p.max_rel_error.to_string(), p.max_abs_error.to_string()]).collect();
    write_csv(&cfg.run.out.join("gradcheck.csv"), &["tensor", "max_rel_error", "max_abs_error"], &rows)?;
    let worst = report.max_rel_error();
    println!("max relative error {worst:.3e}");
    if worst < gc.tolerance {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("max relative error {worst:.3e} exceeds {:.0e}", gc.tolerance)))
    }
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let (bundle, plan) = load(cfg)?;
    let model = cfg.model_config(bundle.num_kcs, bundle.num_questions);
    let rows = ablation(&bundle, &plan, &model, &cfg.train, &cfg.variant)?;
    write_ablation_csv(&rows, cfg.run.out.join("ablation.csv"))?;
    Ok(())
}
