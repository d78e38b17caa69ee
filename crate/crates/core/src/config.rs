//! Declarative experiment description (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nets::QuantSpec;
use crate::oscillation::{DampenConfig, FreezeConfig, DEFAULT_EMA_MOMENTUM};
use crate::quant::EstimatorKind;
use crate::schedule::CosineSchedule;
use crate::toylab::ToyProblem;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub remedy: Remedy,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_bn_batches")]
    pub bn_reestimate_batches: usize,
    /// Momentum of the oscillation-frequency and integer EMAs.
    #[serde(default = "default_ema")]
    pub ema_momentum: f64,
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub toy: Option<ToyProblem>,
    /// Sampling and annealing settings.
    #[serde(default)]
    pub post: PostConfig,
}

fn default_model() -> String {
    "toy_dwnet".into()
}
fn default_bn_batches() -> usize {
    50
}
fn default_ema() -> f64 {
    DEFAULT_EMA_MOMENTUM
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        height: usize,
        width: usize,
        train_samples: usize,
        eval_samples: usize,
        noise: f64,
        #[serde(default = "default_jitter")]
        jitter: f64,
        #[serde(default = "default_blobs")]
        blobs: usize,
        /// Generator seed; the experiment seed when absent.
        #[serde(default)]
        seed: Option<u64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        eval_images: Option<PathBuf>,
        #[serde(default)]
        eval_labels: Option<PathBuf>,
        /// Held-out tail of the training files when no eval pair is given.
        #[serde(default = "default_eval_fraction")]
        eval_fraction: f64,
    },
}

fn default_jitter() -> f64 {
    1.0
}
fn default_blobs() -> usize {
    3
}
fn default_eval_fraction() -> f64 {
    0.1
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            classes: 4,
            height: 16,
            width: 16,
            train_samples: 2048,
            eval_samples: 512,
            noise: 0.1,
            jitter: default_jitter(),
            blobs: default_blobs(),
            seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    #[serde(default = "default_weight_bits")]
    pub weight_bits: u32,
    /// Activations stay in full precision when absent.
    #[serde(default)]
    pub act_bits: Option<u32>,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorKind,
}

fn default_weight_bits() -> u32 {
    3
}
fn default_estimator() -> EstimatorKind {
    EstimatorKind::Ste
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            weight_bits: default_weight_bits(),
            act_bits: None,
            estimator: default_estimator(),
        }
    }
}

impl QuantConfig {
    pub fn spec(&self) -> QuantSpec {
        QuantSpec {
            weight_bits: Some(self.weight_bits),
            act_bits: self.act_bits,
            estimator: self.estimator,
        }
    }
}

/// Start and end of a cosine schedule spanning the whole QAT run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub start: f64,
    pub end: f64,
}

impl Endpoints {
    pub fn over(&self, total_steps: u64) -> Result<CosineSchedule> {
        CosineSchedule::new(self.start, self.end, total_steps.max(1))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Remedy {
    #[default]
    None,
    Dampen {
        lambda: Endpoints,
    },
    Freeze {
        threshold: Endpoints,
        #[serde(default = "default_ema")]
        momentum: f64,
    },
}

impl Remedy {
    pub fn dampen(&self, total_steps: u64) -> Result<Option<DampenConfig>> {
        match self {
            Remedy::Dampen { lambda } => {
                let cfg = DampenConfig {
                    lambda: lambda.over(total_steps)?,
                };
                cfg.validate()?;
                Ok(Some(cfg))
            }
            _ => Ok(None),
        }
    }

    pub fn freeze(&self, total_steps: u64) -> Result<Option<FreezeConfig>> {
        match self {
            Remedy::Freeze { threshold, momentum } => {
                let cfg = FreezeConfig {
                    threshold: threshold.over(total_steps)?,
                    momentum: *momentum,
                };
                cfg.validate()?;
                Ok(Some(cfg))
            }
            _ => Ok(None),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Learning rate of the full-precision phase; `lr` when absent.
    #[serde(default)]
    pub pretrain_lr: Option<f64>,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_pretrain_epochs() -> usize {
    10
}
fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    64
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: default_lr(),
            momentum: default_momentum(),
            pretrain_lr: None,
            pretrain_epochs: default_pretrain_epochs(),
            epochs: default_epochs(),
            batch_size: default_batch(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostConfig {
    /// Samples used to evaluate the task loss.
    #[serde(default = "default_loss_samples")]
    pub loss_samples: usize,
    /// Flip proposals per oscillating weight.
    #[serde(default = "default_proposals")]
    pub proposals_per_weight: usize,
}

fn default_loss_samples() -> usize {
    256
}
fn default_proposals() -> usize {
    50
}

impl Default for PostConfig {
    fn default() -> Self {
        PostConfig {
            loss_samples: default_loss_samples(),
            proposals_per_weight: default_proposals(),
        }
    }
}

impl ExperimentConfig {
    /// A config with every default and the given seed.
    pub fn with_seed(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let DatasetConfig::Idx {
            train_images,
            train_labels,
            eval_images,
            eval_labels,
            ..
        } = &mut self.dataset
        {
            fix(train_images);
            fix(train_labels);
            if let Some(p) = eval_images {
                fix(p);
            }
            if let Some(p) = eval_labels {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.pretrain_lr.is_some_and(|l| !(l > 0.0 && l.is_finite())) {
            return cfg("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return cfg(format!("momentum must be in [0, 1), got {}", o.momentum));
        }
        if o.batch_size < 2 {
            return cfg("batch size must be at least 2".into());
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return cfg(format!("EMA momentum must be in (0, 1), got {}", self.ema_momentum));
        }
        if self.bn_reestimate_batches == 0 {
            return cfg("bn_reestimate_batches must be positive".into());
        }
        if self.post.loss_samples < 2 {
            return cfg("post.loss_samples must be at least 2".into());
        }
        crate::quant::grid_bounds(self.quant.weight_bits, true)?;
        if let Some(b) = self.quant.act_bits {
            crate::quant::grid_bounds(b, false)?;
        }
        self.quant.estimator.validate()?;
        self.remedy.dampen(1)?;
        self.remedy.freeze(1)?;
        if let DatasetConfig::Idx {
            eval_fraction,
            eval_images,
            eval_labels,
            ..
        } = &self.dataset
        {
            if eval_images.is_some() != eval_labels.is_some() {
                return cfg("eval_images and eval_labels must be given together".into());
            }
            if !(*eval_fraction > 0.0 && *eval_fraction < 1.0) {
                return cfg(format!("eval_fraction must be in (0, 1), got {eval_fraction}"));
            }
        }
        if let Some(toy) = &self.toy {
            toy.validate()?;
        }
        Ok(())
    }

    /// Loads or generates the train and eval sets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                height,
                width,
                train_samples,
                eval_samples,
                noise,
                jitter,
                blobs,
                seed,
            } => {
                let all = data::synthetic(&SyntheticSpec {
                    classes: *classes,
                    height: *height,
                    width: *width,
                    samples: train_samples + eval_samples,
                    noise: *noise,
                    seed: seed.unwrap_or(self.seed),
                    blobs: *blobs,
                    jitter: *jitter,
                })?;
                Ok((all.slice(0, *train_samples), all.slice(*train_samples, all.len())))
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                eval_images,
                eval_labels,
                eval_fraction,
            } => {
                let train = data::load_idx(train_images, train_labels)?;
                match (eval_images, eval_labels) {
                    (Some(i), Some(l)) => {
                        let mut eval = data::load_idx(i, l)?;
                        if eval.sample_shape() != train.sample_shape() {
                            return Err(Error::Config(format!(
                                "eval images {:?} differ from train images {:?}",
                                eval.sample_shape(),
                                train.sample_shape()
                            )));
                        }
                        let classes = train.classes.max(eval.classes);
                        eval.classes = classes;
                        let mut train = train;
                        train.classes = classes;
                        Ok((train, eval))
                    }
                    _ => {
                        let cut = ((1.0 - eval_fraction) * train.len() as f64).round() as usize;
                        Ok((train.slice(0, cut), train.slice(cut, train.len())))
                    }
                }
            }
        }
    }
}
