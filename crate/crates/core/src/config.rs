//! The run configuration document: JSON, unknown keys rejected, with
//! `key.path=value` overrides applied after parsing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{self, Dataset, LabelScheme, SplitTag, SyntheticSpec};
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::seed::{self, Purpose};
use crate::sweeper::{AshaSettings, RunTemplate, SearchSpace};
use crate::trainer::{self, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Every random stream (init, shuffle, dropout, sweep, split) derives
    /// from this.
    pub seed: u64,
    /// Label for the report's backbone column.
    pub backbone: String,
    pub data: DataConfig,
    pub net: NetSection,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            backbone: "MLP".into(),
            data: DataConfig::default(),
            net: NetSection::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Seeded subset of the training file.
    pub train_subset: Option<usize>,
    /// Seeded subset of the test file.
    pub test_subset: Option<usize>,
    /// Held out of the training data for sweep-time validation.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::default(),
            train_subset: None,
            test_subset: None,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "default_scheme")]
        labels: LabelScheme,
        /// Defaults to on for letters, off for digits.
        #[serde(default)]
        transpose: Option<bool>,
    },
    Synthetic {
        train_samples: usize,
        test_samples: usize,
        input_dim: usize,
        num_classes: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        label_noise: f64,
    },
}

fn default_scheme() -> LabelScheme {
    LabelScheme::Letters
}

fn default_noise() -> f64 {
    0.3
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::emnist_letters(Path::new("data/emnist"))
    }
}

impl DataSource {
    /// The four EMNIST-Letters files under their distributed names.
    pub fn emnist_letters(dir: &Path) -> Self {
        DataSource::Idx {
            train_images: dir.join("emnist-letters-train-images-idx3-ubyte.gz"),
            train_labels: dir.join("emnist-letters-train-labels-idx1-ubyte.gz"),
            test_images: dir.join("emnist-letters-test-images-idx3-ubyte.gz"),
            test_labels: dir.join("emnist-letters-test-labels-idx1-ubyte.gz"),
            labels: LabelScheme::Letters,
            transpose: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            hidden_dims: vec![256],
            dropout_rate: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub space: SearchSpace,
    pub num_trials: usize,
    pub max_resource: usize,
    pub min_resource: usize,
    pub reduction_factor: usize,
    /// `None` uses the available parallelism.
    pub workers: Option<usize>,
    pub synchronous: bool,
    /// Epochs of the post-sweep run with the best configuration.
    pub refine_epochs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let asha = AshaSettings::default();
        SweepConfig {
            space: SearchSpace::default(),
            num_trials: asha.num_trials,
            max_resource: asha.max_resource,
            min_resource: asha.min_resource,
            reduction_factor: asha.reduction_factor,
            workers: None,
            synchronous: false,
            refine_epochs: 10,
        }
    }
}

/// Train and test splits as loaded for a run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: Dataset,
    pub test: Dataset,
}

impl RunConfig {
    /// Parse a document; unknown keys anywhere are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `a.b.c=value` overrides. The value is read as JSON when it
    /// parses as JSON and as a bare string otherwise. Only existing keys can
    /// be set.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            let mut slot = &mut doc;
            for key in path.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(key))
                    .ok_or_else(|| Error::config(format!("override: unknown key {path:?}")))?;
            }
            *slot = value;
        }
        serde_json::from_value(doc).map_err(|e| Error::config(format!("override: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.net.hidden_dims.contains(&0) {
            return Err(Error::config("net.hidden_dims entries must be positive"));
        }
        if !(0.0..1.0).contains(&self.net.dropout_rate) {
            return Err(Error::config("net.dropout_rate must lie in [0, 1)"));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::config("data.val_fraction must lie in (0, 1)"));
        }
        if self.data.train_subset == Some(0) || self.data.test_subset == Some(0) {
            return Err(Error::config("data subsets must be positive"));
        }
        if let DataSource::Synthetic {
            train_samples,
            test_samples,
            input_dim,
            num_classes,
            noise,
            label_noise,
        } = &self.data.source
        {
            if *train_samples == 0 || *test_samples == 0 || *input_dim == 0 || *num_classes < 2 {
                return Err(Error::config(
                    "synthetic data needs samples, pixels and at least 2 classes",
                ));
            }
            if !(*noise >= 0.0) || !(0.0..=1.0).contains(label_noise) {
                return Err(Error::config("synthetic noise levels out of range"));
            }
        }
        if self.sweep.refine_epochs == 0 {
            return Err(Error::config("sweep.refine_epochs must be positive"));
        }
        self.sweep.space.validate()?;
        self.asha_settings().validate()
    }

    /// The training section with the run seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn net_config(&self, input_dim: usize, num_classes: usize) -> NetConfig {
        trainer::net_config_for(
            input_dim,
            self.net.hidden_dims.clone(),
            num_classes,
            self.net.dropout_rate,
            self.seed,
        )
    }

    pub fn asha_settings(&self) -> AshaSettings {
        let s = &self.sweep;
        AshaSettings {
            num_trials: s.num_trials,
            max_resource: s.max_resource,
            min_resource: s.min_resource,
            reduction_factor: s.reduction_factor,
            seed: self.seed,
            workers: s.workers.unwrap_or_else(|| AshaSettings::default().workers),
            synchronous: s.synchronous,
        }
    }

    pub fn run_template(&self, input_dim: usize, num_classes: usize) -> RunTemplate {
        RunTemplate {
            input_dim,
            hidden_dims: self.net.hidden_dims.clone(),
            num_classes,
            train: self.train_config(),
        }
    }

    /// Load (or generate) the train and test splits, then apply subsets.
    pub fn load_data(&self) -> Result<RunData> {
        let (train, test) = match &self.data.source {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                labels,
                transpose,
            } => {
                let transpose = transpose.unwrap_or(*labels == LabelScheme::Letters);
                let train = data::load_idx_pair(
                    train_images,
                    train_labels,
                    *labels,
                    transpose,
                    SplitTag::Train,
                )?;
                let test = data::load_idx_pair(
                    test_images,
                    test_labels,
                    *labels,
                    transpose,
                    SplitTag::Test,
                )?;
                (train, test)
            }
            DataSource::Synthetic {
                train_samples,
                test_samples,
                input_dim,
                num_classes,
                noise,
                label_noise,
            } => {
                let all = data::synthetic(&SyntheticSpec {
                    samples: train_samples + test_samples,
                    input_dim: *input_dim,
                    num_classes: *num_classes,
                    noise: *noise,
                    label_noise: *label_noise,
                    seed: seed::derive(self.seed, Purpose::Split),
                })?;
                let train_idx: Vec<usize> = (0..*train_samples).collect();
                let test_idx: Vec<usize> = (*train_samples..train_samples + test_samples).collect();
                (
                    all.select(&train_idx, SplitTag::Train),
                    all.select(&test_idx, SplitTag::Test),
                )
            }
        };
        if train.num_classes != test.num_classes || train.input_dim() != test.input_dim() {
            return Err(Error::DataIntegrity(
                "train and test files disagree on image size or class count".into(),
            ));
        }
        let split_seed = seed::derive(self.seed, Purpose::Split);
        let train = match self.data.train_subset {
            Some(n) => train.subset(n, split_seed),
            None => train,
        };
        let test = match self.data.test_subset {
            Some(n) => test.subset(n, split_seed.wrapping_add(1)),
            None => test,
        };
        Ok(RunData { train, test })
    }

    /// Sweep-time `(train, validation)` partition of the training data.
    pub fn sweep_split(&self, train: &Dataset) -> Result<(Dataset, Dataset)> {
        data::split(
            train,
            self.data.val_fraction,
            seed::derive(self.seed, Purpose::Split),
        )
    }
}
