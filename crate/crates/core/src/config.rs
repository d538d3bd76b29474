//! Run configuration: a TOML document with `section.key` overrides applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    MetaTrain,
    Finetune,
}

/// Where the soft prompt sits relative to the class-name tokens in the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptPosition {
    /// `xx[CLASS]`
    Prefix,
    /// `[CLASS]xx`
    Suffix,
    /// `x[CLASS]x`
    Surround,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorVariant {
    OneLayer,
    TwoLayer,
    PreTransformer,
    PostTransformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Addition,
    Multiplication,
    Concatenation,
}

/// Which detector stages receive multi-modal prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MpgPlacement {
    #[serde(rename = "rpn+rcnn")]
    RpnRcnn,
    #[serde(rename = "rcnn-only")]
    RcnnOnly,
    #[serde(rename = "none")]
    None,
}

impl MpgPlacement {
    pub fn rpn(self) -> bool {
        self == MpgPlacement::RpnRcnn
    }

    pub fn rcnn(self) -> bool {
        self != MpgPlacement::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastiveSource {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// 101 recall points, COCO style.
    Coco101,
    /// 11 recall points, VOC 2007 style.
    Voc11,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub support_size: usize,
    /// Widths of the three stride-2 stages.
    pub stage_channels: [usize; 3],
    /// Channels of the stride-8 feature map.
    pub feature_dim: usize,
    /// Channels after the post-RoI block.
    pub roi_dim: usize,
    pub roi_size: usize,
    pub text_dim: usize,
    pub text_layers: usize,
    pub text_hidden: usize,
    pub text_max_len: usize,
    /// Seed of the frozen text encoder and token table; shared by all runs.
    pub text_seed: u64,
    pub anchor_sizes: Vec<f64>,
    pub rpn_hidden: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            support_size: 32,
            stage_channels: [16, 32, 64],
            feature_dim: 64,
            roi_dim: 64,
            roi_size: 7,
            text_dim: 32,
            text_layers: 2,
            text_hidden: 64,
            text_max_len: 32,
            text_seed: 0x7e57,
            anchor_sizes: vec![12.0, 17.0, 24.0],
            rpn_hidden: 32,
            head_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpgConfig {
    pub prompt_len: usize,
    pub prompt_position: PromptPosition,
    pub generator_variant: GeneratorVariant,
    pub fusion: FusionMode,
    pub placement: MpgPlacement,
}

impl Default for MpgConfig {
    fn default() -> Self {
        Self {
            prompt_len: 8,
            prompt_position: PromptPosition::Prefix,
            generator_variant: GeneratorVariant::OneLayer,
            fusion: FusionMode::Addition,
            placement: MpgPlacement::RpnRcnn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Episodes accumulated per optimiser step.
    pub batch_size: usize,
    pub iterations: usize,
    /// Iteration at which the rate is divided by 10.
    pub decay_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            iterations: 2000,
            decay_step: 1500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub decay_step: usize,
    /// Annotations per class in the balanced fine-tuning set.
    pub shot: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            rate: 0.002,
            batch_size: 8,
            iterations: 300,
            decay_step: 200,
            shot: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub contrastive_source: ContrastiveSource,
    /// Lower bound on the norm used when L2-normalising prototypes.
    pub norm_floor: f64,
    pub rpn_samples: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    pub roi_samples: usize,
    pub roi_positive_fraction: f64,
    pub roi_positive_iou: f64,
    pub smooth_l1_beta: f64,
    /// Proposals kept per class and query before RoI sampling.
    pub train_proposals: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.01,
            contrastive_source: ContrastiveSource::Teacher,
            norm_floor: 1.0,
            rpn_samples: 64,
            rpn_positive_fraction: 0.25,
            rpn_positive_iou: 0.7,
            rpn_negative_iou: 0.3,
            roi_samples: 64,
            roi_positive_fraction: 0.25,
            roi_positive_iou: 0.5,
            smooth_l1_beta: 1.0 / 9.0,
            train_proposals: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    /// Context pixels added around a support box before resizing.
    pub support_context: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            way: 2,
            shot: 30,
            queries: 4,
            support_context: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub rpn_nms_threshold: f64,
    pub top_n: usize,
    pub max_detections: usize,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shots: vec![1, 5],
            seeds: vec![0, 1],
            score_threshold: 0.05,
            nms_threshold: 0.5,
            rpn_nms_threshold: 0.7,
            top_n: 100,
            max_detections: 100,
            interpolation: Interpolation::Coco101,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub split: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub model: ModelConfig,
    pub mpg: MpgConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub loss: LossConfig,
    pub episode: EpisodeConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::MetaTrain,
            model: ModelConfig::default(),
            mpg: MpgConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            loss: LossConfig::default(),
            episode: EpisodeConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::parse("run config", e))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    /// Applies `section.key=value` overrides to an already-built config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_toml_str(&self.to_toml(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Stable digest of every setting.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train.decay_step >= self.train.iterations {
            return bad(format!(
                "train.decay_step ({}) must be below train.iterations ({})",
                self.train.decay_step, self.train.iterations
            ));
        }
        if self.finetune.decay_step >= self.finetune.iterations {
            return bad(format!(
                "finetune.decay_step ({}) must be below finetune.iterations ({})",
                self.finetune.decay_step, self.finetune.iterations
            ));
        }
        if self.train.batch_size == 0 || self.finetune.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.mpg.prompt_len == 0 {
            return bad("mpg.prompt_len must be at least 1".into());
        }
        if !(self.loss.temperature > 0.0) {
            return bad(format!("loss.temperature must be positive, got {}", self.loss.temperature));
        }
        if self.episode.way == 0 || self.episode.shot == 0 || self.episode.queries == 0 {
            return bad("episode way, shot and queries must be positive".into());
        }
        let m = &self.model;
        if m.image_size % 8 != 0 || m.support_size % 8 != 0 || m.support_size < 8 {
            return bad("model image and support sizes must be positive multiples of 8".into());
        }
        if m.anchor_sizes.is_empty() {
            return bad("model.anchor_sizes must not be empty".into());
        }
        for t in [self.eval.score_threshold, self.eval.nms_threshold] {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("eval thresholds must lie in (0, 1), got {t}"));
            }
        }
        Ok(())
    }
}

/// Sets `a.b.c = value` in a TOML table; `value` is parsed as TOML and falls
/// back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
