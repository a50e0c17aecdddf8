//! Declarative experiment configuration and its canonical hash.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synthetic::SyntheticSpec;
use crate::data::SplitSpec;
use crate::error::{config, Result};
use crate::picie::PicieConfig;
use crate::seg::SegTrainConfig;
use crate::selfsup::{FinetuneConfig, PretrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Supervised,
    SemiCrossTeach,
    SelfsupAug,
    SelfsupArch,
    Picie,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Self::Supervised,
        Self::SemiCrossTeach,
        Self::SelfsupAug,
        Self::SelfsupArch,
        Self::Picie,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Supervised => "supervised",
            Self::SemiCrossTeach => "semi_cross_teach",
            Self::SelfsupAug => "selfsup_aug",
            Self::SelfsupArch => "selfsup_arch",
            Self::Picie => "picie",
        }
    }

    /// Name of the headline test metric.
    pub fn metric(self) -> &'static str {
        match self {
            Self::Supervised | Self::SemiCrossTeach => "iou",
            Self::SelfsupAug | Self::SelfsupArch => "f1",
            Self::Picie => "miou",
        }
    }
}

/// The label fractions of the standard grid.
pub const FRACTION_GRID: [f64; 5] = [0.0, 0.1, 0.5, 0.7, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Parameter budget shared by the conv and attention segmenters.
    pub param_budget: usize,
    pub classifier_width: usize,
    pub classifier_depth: usize,
    pub picie_width: usize,
    pub picie_depth: usize,
    /// Per-pixel feature dimension of the clustering extractor.
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            param_budget: 15_000,
            classifier_width: 8,
            classifier_depth: 1,
            picie_width: 4,
            picie_depth: 2,
            feature_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub name: String,
    pub method: Method,
    /// `synthetic`, or a directory of processed samples.
    pub dataset: String,
    pub synthetic: SyntheticSpec,
    pub split: SplitSpec,
    pub label_fraction: f64,
    pub seeds: Vec<u64>,
    /// Overrides the epoch count of the method's trainer(s) when set.
    pub epochs: Option<usize>,
    pub num_classes: usize,
    pub model: ModelConfig,
    pub seg: SegTrainConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub picie: PicieConfig,
    /// Evaluation images of the clustering arm; 0 uses the whole test split.
    pub picie_eval_images: usize,
    /// Accepts fractions outside the standard grid.
    pub allow_any_fraction: bool,
    /// Where runs are written; excluded from the hash.
    pub output_dir: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            method: Method::Supervised,
            dataset: "synthetic".into(),
            synthetic: SyntheticSpec::default(),
            split: SplitSpec::standard(0),
            label_fraction: 0.1,
            seeds: vec![1, 2, 3, 4, 5],
            epochs: None,
            num_classes: 2,
            model: ModelConfig::default(),
            seg: SegTrainConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            picie: PicieConfig::default(),
            picie_eval_images: 0,
            allow_any_fraction: false,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::from_toml_str(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config(format!("cannot serialize config: {e}")))
    }

    /// Rejects combinations outside the experimental protocol.
    pub fn validate(&self) -> Result<()> {
        let f = self.label_fraction;
        if !(0.0..=1.0).contains(&f) {
            return Err(config(format!("label fraction {f} outside [0, 1]")));
        }
        if !self.allow_any_fraction && !FRACTION_GRID.contains(&f) {
            return Err(config(format!(
                "label fraction {f} is not on the grid {FRACTION_GRID:?}; set allow_any_fraction to override"
            )));
        }
        match self.method {
            Method::Picie if f != 0.0 => {
                return Err(config(format!("picie trains without labels; label fraction must be 0, got {f}")))
            }
            Method::SelfsupAug | Method::SelfsupArch if !self.allow_any_fraction && f != 0.1 && f != 1.0 => {
                return Err(config(format!("self-supervised fine-tuning uses fraction 0.1 or 1.0, got {f}")))
            }
            Method::SelfsupAug | Method::SelfsupArch | Method::Supervised | Method::SemiCrossTeach if f <= 0.0 => {
                return Err(config(format!("{} needs labels; label fraction must be positive", self.method.name())))
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(config("at least one seed is required"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(config("seeds must be distinct"));
        }
        if self.num_classes < 2 {
            return Err(config("need at least two classes"));
        }
        self.split.validate().map_err(|e| config(e.to_string()))?;
        if self.dataset == "synthetic" {
            self.synthetic.validate()?;
        }
        let cfg = self.resolved();
        match self.method {
            Method::Supervised | Method::SemiCrossTeach => cfg.seg.validate(),
            Method::SelfsupAug | Method::SelfsupArch => {
                cfg.pretrain.validate()?;
                cfg.finetune.optimizer.validate()?;
                cfg.finetune.schedule.validate(cfg.finetune.optimizer.lr)
            }
            Method::Picie => cfg.picie.validate(),
        }
    }

    /// The config with the epoch override and class count pushed into the trainer sections.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(e) = self.epochs {
            c.seg.epochs = e;
            c.pretrain.epochs = e;
            c.finetune.epochs = e;
            c.picie.epochs = e;
        }
        c.seg.num_classes = self.num_classes;
        c.seg.label_fraction = self.label_fraction;
        c
    }

    /// SHA-256 of the canonical JSON form (sorted keys), without the output location.
    pub fn config_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        let canonical = serde_json::to_string(&serde_json::to_value(&c)?)?;
        let digest = Sha256::digest(canonical.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}
