//! Layered experiment configuration: TOML file + `--set key=value` dotted
//! overrides. The serialized effective config written into the run directory
//! is the source of truth for reruns and resume checks.

use std::fs;
use std::path::Path;

use mtor_core::detector::ArchConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{AugParams, BackgroundStyle, SceneSpec, ShiftParams, DEFAULT_CATEGORIES};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Read(String, std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("bad --set override '{0}': expected key=value")]
    BadOverride(String),
    #[error("--set {key}: {message}")]
    BadValue { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub size: SplitSizes,
    pub image_size: usize,
    pub num_objects: (usize, usize),
    pub categories: Vec<String>,
    pub background: BackgroundStyle,
    pub shift: ShiftParams,
    pub aug: AugParams,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SplitSizes {
    pub source: usize,
    pub target: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { source: 200, target: 200 }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            size: SplitSizes::default(),
            image_size: 128,
            num_objects: (1, 4),
            categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            background: BackgroundStyle::Gradient,
            shift: ShiftParams::default(),
            aug: AugParams::default(),
        }
    }
}

impl DatasetConfig {
    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            image_size: self.image_size,
            num_objects: self.num_objects,
            categories: self.categories.clone(),
            background_style: self.background,
            rng_seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DetectorConfig {
    pub channels: [usize; 4],
    pub aspect_ratios: Vec<f64>,
    pub anchor_scale: f64,
    pub roi_grid: usize,
    pub hidden: usize,
    pub proposal_cap_train: usize,
    pub proposal_cap_eval: usize,
    pub rpn_nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 48, 64],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            anchor_scale: 40.0,
            roi_grid: 4,
            hidden: 128,
            proposal_cap_train: 64,
            proposal_cap_eval: 32,
            rpn_nms_iou: 0.7,
        }
    }
}

impl DetectorConfig {
    pub fn arch(&self, image_size: usize, num_classes: usize) -> ArchConfig {
        ArchConfig {
            image_size,
            channels: self.channels,
            aspect_ratios: self.aspect_ratios.clone(),
            anchor_scale: self.anchor_scale,
            roi_grid: self.roi_grid,
            hidden: self.hidden,
            num_classes,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub pretrain_steps: usize,
    pub adapt_steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 0.99,
            epsilon: 0.98,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            pretrain_steps: 1500,
            adapt_steps: 1000,
            seed: 1,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_thresh: 0.5, score_thresh: 0.05, nms_iou: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.train;
        if t.lambda < 0.0 {
            return Err(ConfigError::Invalid("train.lambda must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&t.alpha) {
            return Err(ConfigError::Invalid("train.alpha must be in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&t.epsilon) {
            return Err(ConfigError::Invalid("train.epsilon must be in [0,1]".into()));
        }
        if self.dataset.image_size < 64 {
            return Err(ConfigError::Invalid("dataset.image_size must be >= 64".into()));
        }
        if self.dataset.categories.len() < 2 {
            return Err(ConfigError::Invalid("dataset.categories needs >= 2 entries".into()));
        }
        Ok(())
    }

    pub fn arch(&self) -> ArchConfig {
        self.detector.arch(self.dataset.image_size, self.dataset.categories.len())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("serializable config")
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

/// Load `path` (or defaults when `None`), then apply `--set` overrides in
/// order. Overrides are parsed as TOML values with a bare-string fallback.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<ExperimentConfig, ConfigError> {
    let mut value: toml::Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| ConfigError::Read(p.display().to_string(), e))?;
            text.parse::<toml::Value>()?
        }
        None => toml::Value::Table(toml::map::Map::new()),
    };
    for ov in overrides {
        let (key, raw) = ov.split_once('=').ok_or_else(|| ConfigError::BadOverride(ov.clone()))?;
        // wrap in a dummy document so scalars and arrays both parse
        let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Value>() {
            Ok(doc) => doc.get("v").cloned().expect("key v just written"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        set_path(&mut value, key, parsed).map_err(|message| ConfigError::BadValue {
            key: key.to_string(),
            message,
        })?;
    }
    // deserialize through the defaults so partial files work
    let cfg: ExperimentConfig = value.try_into()?;
    cfg.validate()?;
    Ok(cfg)
}

fn set_path(root: &mut toml::Value, dotted: &str, new: toml::Value) -> Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| format!("'{part}' is not a table"))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), new);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    unreachable!("empty key")
}
