//! Behaviour of the learned uncertainty on synthetic cohorts.

use ukt::data::{preprocess_sequences, split_folds};
use ukt::model::{ModelConfig, VariantConfig};
use ukt::synth::{generate, Cohort, SynthSpec};
use ukt::train::{covariance_heatmap, evaluate, mean_std, train_fold, HeatmapLayout, TrainConfig};

fn small_run(spec: &SynthSpec, seed: u64) -> (ukt::synth::SynthOutput, ukt::model::ModelParams, f64) {
    let out = generate(spec).unwrap();
    let bundle = preprocess_sequences(&out.bundle, 3, 60).unwrap();
    let plan = split_folds(&bundle, 0.2, 5, seed).unwrap();
    let model = ModelConfig { d: 16, heads: 4, max_len: 60, ..ModelConfig::new(bundle.num_kcs, bundle.num_questions) };
    let cfg = TrainConfig { max_epochs: 30, patience: 5, learning_rate: 1e-2, batch_size: 16, seed, ..TrainConfig::default() };
    let trained = train_fold(&bundle, &plan, 0, &model, &cfg, &VariantConfig::default()).unwrap();
    let test_auc = evaluate(&trained.params, &VariantConfig::default(), &plan.test_sequences(&bundle), 0.5).unwrap().auc;
    (out, trained.params, test_auc)
}

#[test]
fn uninformative_responses_give_chance_auc() {
    let spec = SynthSpec { num_students: 120, num_kcs: 10, min_len: 30, max_len: 60, guess: 0.49, slip: 0.49, seed: 4, ..SynthSpec::default() };
    let (_, _, test_auc) = small_run(&spec, 4);
    assert!((test_auc - 0.5).abs() < 0.05, "test AUC {test_auc}");
}

#[test]
#[ignore = "not reproduced at this scale: trained covariances do not separate the two cohorts"]
fn erratic_cohort_has_larger_covariance() {
    for seed in 0..3 {
        let spec = SynthSpec {
            num_students: 120,
            num_kcs: 20,
            min_len: 30,
            max_len: 60,
            seed,
            cohorts: vec![
                Cohort { weight: 1.0, ability_mean: 0.0, ability_std: 0.1 },
                Cohort { weight: 1.0, ability_mean: 0.0, ability_std: 2.0 },
            ],
            ..SynthSpec::default()
        };
        let (out, params, _) = small_run(&spec, seed);
        let rows = covariance_heatmap(&params, &VariantConfig::default(), &out.bundle.sequences, HeatmapLayout::Scalar).unwrap();
        let mut groups = [Vec::new(), Vec::new()];
        for (student, cov) in rows {
            groups[out.cohort[student]].push(cov[0]);
        }
        let (narrow, _) = mean_std(&groups[0]);
        let (wide, _) = mean_std(&groups[1]);
        assert!(wide > narrow, "seed {seed}: narrow {narrow:.4} wide {wide:.4}");
    }
}
