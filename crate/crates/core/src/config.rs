//! Versioned JSON experiment configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fusenet::{BackboneSpec, FusionConfig, FusionOp, IntegrationLevel, SharingMode};
use crate::phantom::{canonical_sequences, PhantomSpec};
use crate::preprocess::PreprocessConfig;
use crate::seqdrop::DropPolicy;
use crate::trainer::{check_censor, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 20,
            val: 6,
            test: 10,
        }
    }
}

impl SplitSizes {
    pub fn named(&self) -> [(&'static str, usize); 3] {
        [("train", self.train), ("val", self.val), ("test", self.test)]
    }
}

/// One architecture of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub integration: IntegrationLevel,
    #[serde(default)]
    pub sharing: Option<SharingMode>,
    pub fusion_op: FusionOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub val_every: u64,
    #[serde(default)]
    pub val_censor: Option<BTreeSet<String>>,
    pub oversample_factor: f64,
    pub saliency_every: u64,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            val_every: t.val_every,
            val_censor: None,
            oversample_factor: t.oversample_factor,
            saliency_every: t.saliency_every,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSettings {
    pub enabled: bool,
    pub p: f64,
}

impl Default for DropoutSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            p: DropPolicy::default().p_drop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSettings {
    /// Censor sets evaluated by `eval` when no `--censor` is given.
    pub censor_sets: Vec<BTreeSet<String>>,
    pub subset_assay: bool,
    /// Patient-level bootstrap resamples for the mAP interval; 0 skips it.
    pub bootstrap_resamples: usize,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            censor_sets: vec![BTreeSet::new(), ["BRAVO-post".to_string()].into()],
            subset_assay: true,
            bootstrap_resamples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Seeds model initialisation, sampling and dropout.
    pub seed: u64,
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub phantom: PhantomSpec,
    pub split: SplitSizes,
    pub preprocess: PreprocessConfig,
    pub backbone: BackboneSpec,
    pub models: Vec<ModelEntry>,
    /// `(pre, post)` sequence names for the subtraction network.
    pub subtract_pair: [String; 2],
    pub tie_lambda: f64,
    pub training: TrainingSettings,
    pub dropout: DropoutSettings,
    pub evaluation: EvaluationSettings,
    /// Grid entries trained concurrently.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let backbone = BackboneSpec::default();
        let models = FusionConfig::experiment_grid(&backbone, 4, 5, [0, 2])
            .into_iter()
            .map(|c| ModelEntry {
                integration: c.integration,
                sharing: c.sharing,
                fusion_op: c.fusion_op,
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            dataset_dir: "data".into(),
            output_dir: "runs".into(),
            phantom: PhantomSpec::default(),
            split: SplitSizes::default(),
            preprocess: PreprocessConfig::default(),
            backbone,
            models,
            subtract_pair: ["CUBE-pre".into(), "CUBE-post".into()],
            tie_lambda: 1e-3,
            training: TrainingSettings::default(),
            dropout: DropoutSettings::default(),
            evaluation: EvaluationSettings::default(),
            workers: 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Applies a seed override to both the experiment and the phantom.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.phantom.seed = seed;
        self
    }

    pub fn canonical(&self) -> Vec<String> {
        canonical_sequences()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.phantom.validate().map_err(|e| ConfigError(e.to_string()))?;
        let canonical = self.canonical();
        let names: Vec<&str> = self.phantom.sequence_profiles.iter().map(|p| p.name.as_str()).collect();
        if let Some(c) = canonical.iter().find(|c| !names.contains(&c.as_str())) {
            return bad(format!("phantom.sequence_profiles lacks canonical sequence {c}"));
        }
        if self.split.val == 0 {
            return bad("split.val must be at least 1");
        }
        if self.split.train == 0 {
            return bad("split.train must be at least 1");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.preprocess.tiles.contains(&0) || self.preprocess.resize.iter().any(|&n| n < 2) {
            return bad("preprocess.tiles must be positive and preprocess.resize at least 2");
        }
        self.subtract_pair_indices()?;
        if self.models.is_empty() {
            return bad("models is empty");
        }
        for c in self.fusion_configs()? {
            c.validate().map_err(|e| ConfigError(format!("model {}: {e}", c.label())))?;
        }
        let mut labels = BTreeSet::new();
        for c in self.fusion_configs()? {
            if !labels.insert(c.label()) {
                return bad(format!("models lists {} twice", c.label()));
            }
        }
        self.train_config(self.dropout.enabled)
            .validate(&canonical)
            .map_err(|e| ConfigError(e.to_string()))?;
        if self.dropout.enabled {
            DropPolicy::with_p(self.dropout.p)
                .validate()
                .map_err(|e| ConfigError(format!("dropout: {e}")))?;
        }
        for c in &self.evaluation.censor_sets {
            if !c.is_empty() {
                check_censor(c, &canonical).map_err(|e| ConfigError(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn subtract_pair_indices(&self) -> Result<[usize; 2], ConfigError> {
        let canonical = self.canonical();
        let idx = |n: &String| {
            canonical
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| ConfigError(format!("subtract_pair names unknown sequence {n:?}")))
        };
        Ok([idx(&self.subtract_pair[0])?, idx(&self.subtract_pair[1])?])
    }

    /// Fully specified model configs in `models` order.
    pub fn fusion_configs(&self) -> Result<Vec<FusionConfig>, ConfigError> {
        let pair = self.subtract_pair_indices()?;
        let n_seq = self.canonical().len();
        Ok(self
            .models
            .iter()
            .map(|m| FusionConfig {
                integration: m.integration,
                sharing: m.sharing,
                fusion_op: m.fusion_op,
                tie_lambda: self.tie_lambda,
                backbone: self.backbone.clone(),
                n_seq,
                n_slices: self.preprocess.n_slices,
                subtract_pair: (m.fusion_op == FusionOp::SubtractPair).then_some(pair),
            })
            .collect())
    }

    pub fn train_config(&self, dropout: bool) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            val_every: t.val_every,
            val_censor: t.val_censor.clone(),
            seed: self.seed,
            dropout: dropout.then(|| DropPolicy::with_p(self.dropout.p)),
            oversample_factor: t.oversample_factor,
            saliency_every: t.saliency_every,
        }
    }

    /// Directory of one trained model.
    pub fn run_dir(&self, model: &FusionConfig) -> PathBuf {
        let mut name = model.label();
        if self.dropout.enabled {
            name.push_str("-dropout");
        }
        self.output_dir.join(name)
    }
}
