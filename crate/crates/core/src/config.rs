//! Run configuration: TOML input, defaults, validation and the config hash.
//!
//! Every section and field is optional; omitted values take the defaults
//! below. Unknown keys are rejected.
//!
//! ```toml
//! seed = 0
//!
//! [model]
//! preset = "resnet50-3d"      # or "tiny"
//! in_channels = 2
//! # backbone_weights = "backbone.l3ck"
//!
//! [model.lora]
//! rank = 4
//! scale = 1.0
//! exclude = []                # conv names or prefixes left unadapted
//!
//! [model.head]
//! hidden = 128
//! dropout = 0.5
//!
//! [data]
//! extents = [128, 128, 128]
//! normalize = true
//!
//! [train]
//! epochs = 100
//! batch_size = 4
//! folds = 5
//! lr_lora = 1e-4
//! lr_head = 1e-5
//! weight_decay = 1e-4
//! save_backbone = false
//!
//! [train.adamw]
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{BackboneConfig, HeadSettings, LoraSettings};
use crate::optim::AdamWConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    pub in_channels: usize,
    /// L3CK file holding every frozen backbone tensor. Without it the
    /// backbone is drawn from `seed`.
    pub backbone_weights: Option<PathBuf>,
    pub lora: LoraSettings,
    pub head: HeadSettings,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "resnet50-3d".into(),
            in_channels: 2,
            backbone_weights: None,
            lora: LoraSettings::default(),
            head: HeadSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Training grid; volumes on another grid are resampled.
    pub extents: [usize; 3],
    /// Per-channel z-scoring of every volume.
    pub normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            extents: [128, 128, 128],
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub lr_lora: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    /// Also store frozen tensors in fold checkpoints.
    pub save_backbone: bool,
    pub adamw: AdamWConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            folds: 5,
            lr_lora: 1e-4,
            lr_head: 1e-5,
            weight_decay: 1e-4,
            save_backbone: false,
            adamw: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
}

impl RunConfig {
    /// Parse and validate TOML. Relative `backbone_weights` paths are kept
    /// as written; see [`RunConfig::load`].
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a TOML file, resolving `backbone_weights` against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let (Some(w), Some(dir)) = (&cfg.model.backbone_weights, path.parent()) {
            if w.is_relative() {
                cfg.model.backbone_weights = Some(dir.join(w));
            }
        }
        Ok(cfg)
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        BackboneConfig::preset(&self.model.preset, self.model.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        self.backbone().map_err(|e| Error::Config(format!("model.preset: {e}")))?;
        if self.model.in_channels == 0 {
            return bad("model.in_channels", "must be positive".into());
        }
        if self.model.lora.rank == 0 {
            return bad("model.lora.rank", "must be positive".into());
        }
        if !self.model.lora.scale.is_finite() {
            return bad("model.lora.scale", "must be finite".into());
        }
        if self.model.head.hidden == 0 {
            return bad("model.head.hidden", "must be positive".into());
        }
        let p = self.model.head.dropout;
        if !(0.0..1.0).contains(&p) {
            return bad("model.head.dropout", format!("must lie in [0, 1), got {p}"));
        }
        if self.data.extents.contains(&0) {
            return bad("data.extents", format!("must be positive, got {:?}", self.data.extents));
        }
        let t = &self.train;
        for (field, v) in [("train.epochs", t.epochs), ("train.batch_size", t.batch_size)] {
            if v == 0 {
                return bad(field, "must be positive".into());
            }
        }
        if t.folds < 2 {
            return bad("train.folds", format!("must be at least 2, got {}", t.folds));
        }
        for (field, v) in [
            ("train.lr_lora", t.lr_lora),
            ("train.lr_head", t.lr_head),
            ("train.weight_decay", t.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, format!("must be finite and non-negative, got {v}"));
            }
        }
        let a = &t.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return bad("train.adamw", "betas must lie in [0, 1)".into());
        }
        if !(a.eps > 0.0) {
            return bad("train.adamw.eps", "must be positive".into());
        }
        Ok(())
    }

    /// Canonical JSON of the resolved configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of SHA-256 over [`RunConfig::canonical_json`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Resolved configuration as TOML, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
