//! Run configuration: a sectioned TOML file, overridden by flags, echoed
//! next to every run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ukt::data::LogFormat;
use ukt::model::{ModelConfig, Variant, VariantConfig};
use ukt::synth::SynthSpec;
use ukt::train::{HeatmapLayout, NoiseScope, TrainConfig, LAMBDA_GRID};

use crate::CliError;

/// File name of the resolved configuration written to the output directory.
pub const RESOLVED_NAME: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out: PathBuf,
    /// Seeds the split, initialisation, shuffling, dropout, synthesis and
    /// noise injection.
    pub seed: u64,
    pub variant: Variant,
    /// Validation fold for single-model commands.
    pub fold: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { out: PathBuf::from("ukt-out"), seed: 0, variant: Variant::Ukt, fold: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: Option<PathBuf>,
    /// Detected from the first line when absent.
    pub format: Option<LogFormat>,
    pub expand_kcs: bool,
    pub min_len: usize,
    pub max_len: usize,
    pub test_fraction: f64,
    pub folds: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { dataset: None, format: None, expand_kcs: true, min_len: 3, max_len: 200, test_fraction: 0.2, folds: 5 }
    }
}

/// Architecture settings; table sizes come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub score_scale: Option<f64>,
    pub use_question_difficulty: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1);
        Self {
            d: m.d,
            heads: m.heads,
            blocks: m.blocks,
            dropout: m.dropout,
            score_scale: m.score_scale,
            use_question_difficulty: m.use_question_difficulty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub noise_rate: f64,
    pub noise_scope: NoiseScope,
    pub lambda_grid: Vec<f64>,
    pub heatmap_layout: HeatmapLayout,
    pub stress_variants: Vec<Variant>,
    pub threshold: f64,
    /// Checkpoint for eval and heatmap; defaults to the output directory's.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            noise_rate: 0.2,
            noise_scope: NoiseScope::Both,
            lambda_grid: LAMBDA_GRID.to_vec(),
            heatmap_layout: HeatmapLayout::Scalar,
            stress_variants: vec![Variant::Ukt, Variant::WithoutCl],
            threshold: 0.5,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub variant: VariantConfig,
    pub synth: SynthSpec,
    pub experiment: ExperimentSection,
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub variant: Option<Variant>,
    pub epochs: Option<usize>,
    pub dim: Option<usize>,
    pub heads: Option<usize>,
    pub blocks: Option<usize>,
    pub lr: Option<f64>,
    pub dropout: Option<f64>,
    pub batch_size: Option<usize>,
    pub noise_rate: Option<f64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always serializable")
    }

    /// Applies flag overrides and propagates the run seed.
    pub fn resolve(mut self, o: &Overrides) -> Self {
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        if o.dataset.is_some() {
            self.data.dataset = o.dataset.clone();
        }
        set!(o.out, self.run.out);
        set!(o.seed, self.run.seed);
        set!(o.lambda, self.variant.lambda);
        set!(o.variant, self.run.variant);
        set!(o.epochs, self.train.max_epochs);
        set!(o.dim, self.model.d);
        set!(o.heads, self.model.heads);
        set!(o.blocks, self.model.blocks);
        set!(o.lr, self.train.learning_rate);
        set!(o.dropout, self.model.dropout);
        set!(o.batch_size, self.train.batch_size);
        set!(o.noise_rate, self.experiment.noise_rate);
        self.train.seed = self.run.seed;
        self.synth.seed = self.run.seed;
        self
    }

    pub fn model_config(&self, num_kcs: usize, num_questions: usize) -> ModelConfig {
        ModelConfig {
            d: self.model.d,
            heads: self.model.heads,
            blocks: self.model.blocks,
            max_len: self.data.max_len,
            dropout: self.model.dropout,
            score_scale: self.model.score_scale,
            use_question_difficulty: self.model.use_question_difficulty,
            ..ModelConfig::new(num_kcs, num_questions)
        }
    }

    /// The loss switches of the selected variant.
    pub fn variant_config(&self) -> VariantConfig {
        self.run.variant.apply(self.variant)
    }

    pub fn write_resolved(&self) -> Result<PathBuf, CliError> {
        let path = self.run.out.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_and_overrides() {
        let text = "[run]\nseed = 3\nvariant = \"wo-cl\"\n[model]\nd = 16\n[train]\nmax_epochs = 4\n";
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.model.d, 16);
        assert_eq!(c.model.heads, 4);
        assert_eq!(c.run.variant, Variant::WithoutCl);
        let r = c.resolve(&Overrides { dim: Some(8), lambda: Some(0.5), ..Overrides::default() });
        assert_eq!(r.model.d, 8);
        assert_eq!(r.train.max_epochs, 4);
        assert_eq!(r.variant.lambda, 0.5);
        assert_eq!((r.train.seed, r.synth.seed), (3, 3));
        assert!(!r.variant_config().use_cl);
        assert_eq!(RunConfig::from_toml(&r.to_toml()).unwrap(), r);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nepochs = 3\n"), Err(CliError::Usage(_))));
    }
}
