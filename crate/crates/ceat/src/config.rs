//! Run configuration: a flat TOML document with strict key checking, so
//! a misspelled hyperparameter fails fast instead of silently using a
//! default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Precision;
use crate::vit::ModelShape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Path to an existing dataset pair; empty means generate synthetic
    /// data from the fields below. When set, `{dataset_path}.train` and
    /// `{dataset_path}.test` are loaded.
    pub dataset_path: String,
    pub synthetic_classes: usize,
    pub synthetic_train_per_class: usize,
    pub synthetic_test_per_class: usize,
    pub noise_sigma: f64,

    pub image_size: usize,
    pub channels: usize,
    pub base_classes: usize,
    pub classes_per_task: usize,

    pub patch_size: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    /// First block index hosting expansion branches in incremental tasks.
    pub incremental_from: usize,

    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs_base: usize,
    pub epochs_incremental: usize,
    pub batch_size: usize,

    pub tau: f64,
    pub pcl_normalize: bool,
    pub pcl_anchor_mean: bool,
    /// Use the classifier's predicted labels instead of ground truth when
    /// grouping contrastive positives.
    pub pcl_predicted_positives: bool,
    pub pcl_on_base: bool,
    pub distill_temperature: f64,

    pub seed: u64,
    pub precision: Precision,
    pub output_dir: String,
    pub run_baseline: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_path: String::new(),
            synthetic_classes: 10,
            synthetic_train_per_class: 200,
            synthetic_test_per_class: 50,
            noise_sigma: 0.06,
            image_size: 16,
            channels: 1,
            base_classes: 4,
            classes_per_task: 2,
            patch_size: 4,
            model_dim: 64,
            heads: 4,
            blocks: 6,
            mlp_ratio: 4,
            incremental_from: 2,
            lr: 5e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epochs_base: 50,
            epochs_incremental: 30,
            batch_size: 32,
            tau: 0.1,
            pcl_normalize: true,
            pcl_anchor_mean: true,
            pcl_predicted_positives: false,
            pcl_on_base: true,
            distill_temperature: 2.0,
            seed: 1993,
            precision: Precision::Single,
            output_dir: "runs/out".into(),
            run_baseline: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.model_shape();
        shape.validate()?;
        if self.base_classes == 0 || self.classes_per_task == 0 {
            return Err(Error::Config("schedule needs nonzero class counts".into()));
        }
        if self.dataset_path.is_empty() {
            if self.base_classes > self.synthetic_classes {
                return Err(Error::Config(format!(
                    "base {} exceeds {} classes",
                    self.base_classes, self.synthetic_classes
                )));
            }
            if self.synthetic_train_per_class == 0 || self.synthetic_test_per_class == 0 {
                return Err(Error::Config("synthetic splits need samples".into()));
            }
        }
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("lr {} / weight decay {}", self.lr, self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("betas {} {}", self.beta1, self.beta2)));
        }
        if self.epochs_base == 0 || self.epochs_incremental == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if self.distill_temperature <= 0.0 {
            return Err(Error::Config(format!(
                "distillation temperature {} must be positive",
                self.distill_temperature
            )));
        }
        if self.output_dir.is_empty() {
            return Err(Error::Config("output_dir must be set".into()));
        }
        Ok(())
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            image_size: self.image_size,
            channels: self.channels,
            patch_size: self.patch_size,
            dim: self.model_dim,
            heads: self.heads,
            blocks: self.blocks,
            mlp_ratio: self.mlp_ratio,
            incremental_from: self.incremental_from,
        }
    }

    /// Output directory, honoring the `CEAT_OUTPUT_DIR` override.
    pub fn effective_output_dir(&self) -> PathBuf {
        match std::env::var("CEAT_OUTPUT_DIR") {
            Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => PathBuf::from(&self.output_dir),
        }
    }
}
