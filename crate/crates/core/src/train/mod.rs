//! Two-stage training: the warp network first, then the fusion network on
//! cached intermediate estimates.

mod cache;
mod dataset;
mod fusion_stage;
mod warp_stage;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

pub use cache::{
    precompute_intermediates, read_pair_image, write_pair_image, CacheManifest, IntermediateCache, PrecomputeReport,
    PAIR_MAGIC,
};
pub use dataset::{load_dataset, sample_patch_pair, PatchPair, SequenceData, SequenceDataset};
pub use fusion_stage::{train_fusion_stage, FusionReport, FusionTrainer};
pub use warp_stage::{train_warp_stage, WarpReport, WarpTrainer};

use crate::config::{positive, KeyValues};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::local::WarpNetConfig;
use crate::tensor::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Warp,
    Fusion,
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "warp" => Ok(Stage::Warp),
            "fusion" => Ok(Stage::Fusion),
            _ => Err(format!("unknown stage `{s}`, expected `warp` or `fusion`")),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Warp => "warp",
            Stage::Fusion => "fusion",
        })
    }
}

/// How the learning rate evolves over a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `learning_rate` to zero over all steps.
    Cosine,
}

impl FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(format!("unknown schedule `{s}`, expected `constant` or `cosine`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub epochs: usize,
    pub patch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub warp: WarpNetConfig,
    pub fusion: FusionConfig,
    /// Fraction of sequences held out for validation.
    pub val_fraction: f64,
    /// Patch pairs drawn per epoch; defaults to the number of training pairs.
    pub pairs_per_epoch: Option<usize>,
    /// Warp checkpoint the fusion cache must have been produced with.
    pub warp_checkpoint: Option<PathBuf>,
    /// Fusion stage also updates the warp network.
    pub joint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Warp,
            batch_size: 16,
            epochs: 12,
            patch_size: 256,
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            warp: WarpNetConfig::default(),
            fusion: FusionConfig::default(),
            val_fraction: 0.1,
            pairs_per_epoch: None,
            warp_checkpoint: None,
            joint: false,
        }
    }
}

impl TrainConfig {
    /// Recognized keys: `stage`, `batch_size`, `epochs`, `patch_size`,
    /// `learning_rate`, `lr_schedule`, `seed`, `kernel_size`, `warp_widths`, `zero_head`,
    /// `fusion_width`, `val_fraction`, `pairs_per_epoch`, `warp_checkpoint`,
    /// `joint`.
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            stage: kv.take("stage")?.unwrap_or(d.stage),
            batch_size: kv.take("batch_size")?.unwrap_or(d.batch_size),
            epochs: kv.take("epochs")?.unwrap_or(d.epochs),
            patch_size: kv.take("patch_size")?.unwrap_or(d.patch_size),
            learning_rate: kv.take("learning_rate")?.unwrap_or(d.learning_rate),
            lr_schedule: kv.take("lr_schedule")?.unwrap_or(d.lr_schedule),
            seed: kv.take("seed")?.unwrap_or(d.seed),
            warp: WarpNetConfig {
                kernel_size: kv.take("kernel_size")?.unwrap_or(d.warp.kernel_size),
                widths: kv.take_list("warp_widths")?.unwrap_or(d.warp.widths),
                zero_head: kv.take("zero_head")?.unwrap_or(d.warp.zero_head),
            },
            fusion: FusionConfig {
                width: kv.take("fusion_width")?.unwrap_or(d.fusion.width),
                ..d.fusion
            },
            val_fraction: kv.take("val_fraction")?.unwrap_or(d.val_fraction),
            pairs_per_epoch: kv.take("pairs_per_epoch")?,
            warp_checkpoint: kv.take("warp_checkpoint")?,
            joint: kv.take("joint")?.unwrap_or(d.joint),
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_key_values(KeyValues::read(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        positive("batch_size", self.batch_size)?;
        positive("epochs", self.epochs)?;
        positive("patch_size", self.patch_size)?;
        positive("learning_rate", self.learning_rate)?;
        positive("fusion_width", self.fusion.width)?;
        if let Some(p) = self.pairs_per_epoch {
            positive("pairs_per_epoch", p)?;
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "`val_fraction` must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.warp.widths.is_empty() || self.warp.widths.contains(&0) {
            return Err(Error::Config("`warp_widths` must list positive widths".into()));
        }
        if self.patch_size < self.warp.downsampling() {
            return Err(Error::Config(format!(
                "`patch_size` {} is below the warp network's downsampling factor {}",
                self.patch_size,
                self.warp.downsampling()
            )));
        }
        if self.warp.kernel_size % 2 == 0 {
            return Err(Error::Config("`kernel_size` must be odd".into()));
        }
        Ok(())
    }

    pub(crate) fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    /// Learning rate for optimizer step `step` (0-based) of a run of
    /// `total` steps.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine if total == 0 => self.learning_rate,
            LrSchedule::Cosine => {
                let progress = (step as f64 / total as f64).min(1.0);
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    pub(crate) fn epoch_pairs(&self, ds: &SequenceDataset) -> usize {
        self.pairs_per_epoch.unwrap_or(ds.pair_count()).max(1)
    }
}

/// Mean loss of one epoch, overall and per sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub sequence_loss: std::collections::BTreeMap<String, f64>,
}

#[derive(Default)]
pub(crate) struct LossTally {
    sum: f64,
    count: usize,
    per_seq: std::collections::BTreeMap<String, (f64, usize)>,
}

impl LossTally {
    pub(crate) fn add(&mut self, seq: &str, loss: f64) {
        self.sum += loss;
        self.count += 1;
        let e = self.per_seq.entry(seq.to_string()).or_default();
        e.0 += loss;
        e.1 += 1;
    }

    pub(crate) fn finish(self) -> EpochStats {
        EpochStats {
            mean_loss: self.sum / self.count.max(1) as f64,
            sequence_loss: self.per_seq.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        }
    }
}
