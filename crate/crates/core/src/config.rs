//! Experiment configuration as a TOML document.
//!
//! One root `seed` drives everything: the data, pretraining and training
//! seeds are derived from it, so a config file fully determines a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::episodes::SynthConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::pretrain::PretrainConfig;
use crate::refine::{CascadeConfig, PriorMode, WeightMode};
use crate::rng::{derive_seed, tag};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Dataset directory, relative to the output directory unless absolute.
    pub path: PathBuf,
    pub synth: SynthConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data"),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test episodes per split.
    pub episodes: usize,
    /// Support images per test episode.
    pub shots: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            shots: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<CascadeConfig>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            variants: vec![
                CascadeConfig::new(1, WeightMode::Different, PriorMode::Augmented),
                CascadeConfig::new(2, WeightMode::Different, PriorMode::Plain),
                CascadeConfig::new(2, WeightMode::Different, PriorMode::Augmented),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Index of the split whose test classes are held out.
    pub split: usize,
    pub n_splits: usize,
    /// Output directory; the command line and environment can override it.
    pub output: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            split: 0,
            n_splits: 4,
            output: None,
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            fusion: FusionConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        };
        cfg.set_seed(0);
        cfg
    }
}

impl ExperimentConfig {
    /// Settings sized for a single CPU core: a shorter schedule with a
    /// larger step than the full-scale defaults.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.train.epochs = 40;
        cfg.train.base_lr = 0.01;
        cfg.eval.episodes = 200;
        cfg
    }

    /// Set the root seed and re-derive every stream seed from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.synth.seed = derive_seed(seed, &[tag::DATA]);
        self.pretrain.seed = derive_seed(seed, &[tag::BACKBONE]);
        self.train.seed = derive_seed(seed, &[tag::MODEL]);
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.synth.validate()?;
        self.backbone.validate()?;
        self.pretrain.validate()?;
        self.fusion.validate()?;
        self.train.validate()?;
        if self.n_splits == 0 || self.dataset.synth.n_classes % self.n_splits != 0 {
            return Err(Error::IndivisibleSplits {
                n_classes: self.dataset.synth.n_classes,
                n_splits: self.n_splits,
            });
        }
        if self.split >= self.n_splits {
            return Err(Error::config("split", format!("must be below n_splits = {}", self.n_splits)));
        }
        if self.fusion.mid_channels != self.backbone.mid_channels() {
            return Err(Error::config(
                "fusion.mid_channels",
                format!("must equal the backbone's mid-level width {}", self.backbone.mid_channels()),
            ));
        }
        let min = self.backbone.min_input();
        if self.dataset.synth.image_size < min {
            return Err(Error::config(
                "dataset.synth.image_size",
                format!("must be at least the backbone's total stride {min}"),
            ));
        }
        if self.eval.shots == 0 {
            return Err(Error::config("eval.shots", "must be at least 1"));
        }
        if self.dataset.synth.samples_per_class <= self.eval.shots.max(self.train.shots) {
            return Err(Error::config(
                "dataset.synth.samples_per_class",
                "must exceed the number of shots",
            ));
        }
        for v in &self.ablation.variants {
            v.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parse, re-derive stream seeds from the root seed, and validate.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config { field, constraint } if field == "config" => {
                Error::config(path.display().to_string(), constraint)
            }
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Dataset directory resolved against `out`.
    pub fn dataset_dir(&self, out: &Path) -> PathBuf {
        if self.dataset.path.is_absolute() {
            self.dataset.path.clone()
        } else {
            out.join(&self.dataset.path)
        }
    }

    /// Fingerprint of everything that shapes the trained cascade.
    pub fn model_fingerprint(&self) -> String {
        let v = serde_json::json!({
            "seed": self.seed,
            "split": self.split,
            "n_splits": self.n_splits,
            "synth": self.dataset.synth,
            "backbone": self.backbone,
            "pretrain": self.pretrain,
            "fusion": self.fusion,
            "train": self.train,
        });
        crate::fingerprint(v.to_string().as_bytes())
    }
}
