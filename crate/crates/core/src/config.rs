//! Run configuration, read from and written to TOML.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::BackendConfig;
use crate::criterion::{CostWeights, LossWeights};
use crate::data::{SynthConfig, ANNOTATIONS_FILE, PROMPTS_FILE, SPLIT_FILE, TEST_TAG, TRAIN_TAG, VIDEOS_DIR};
use crate::dfa::{FusionMode, DEFAULT_TEMPLATE};
use crate::error::{config_err, Error, Result};
use crate::eval::EvalProtocol;
use crate::head::HeadConfig;
use crate::prior::{PriorSource, SamplingMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root; the file names below are relative to it unless absolute.
    pub root: PathBuf,
    pub annotations: PathBuf,
    pub split: PathBuf,
    pub prompts: Option<PathBuf>,
    pub videos: PathBuf,
    pub clip_len: usize,
    pub stride: usize,
    pub frame_rate: f64,
    /// Sentence template for classes without prompts; `{CLS}` is the class name.
    pub template: String,
    pub train_tag: String,
    pub eval_tag: String,
    /// Use every k-th annotated frame of a training video as a keyframe.
    pub keyframe_step: usize,
    /// Detection file supplying boxes for the external prior source.
    pub external_priors: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("."),
            annotations: PathBuf::from(ANNOTATIONS_FILE),
            split: PathBuf::from(SPLIT_FILE),
            prompts: Some(PathBuf::from(PROMPTS_FILE)),
            videos: PathBuf::from(VIDEOS_DIR),
            clip_len: 16,
            stride: 1,
            frame_rate: 25.0,
            template: DEFAULT_TEMPLATE.to_string(),
            train_tag: TRAIN_TAG.to_string(),
            eval_tag: TEST_TAG.to_string(),
            keyframe_step: 1,
            external_priors: None,
        }
    }
}

impl DataConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn annotations_path(&self) -> PathBuf {
        self.resolve(&self.annotations)
    }

    pub fn split_path(&self) -> PathBuf {
        self.resolve(&self.split)
    }

    pub fn prompts_path(&self) -> Option<PathBuf> {
        self.prompts.as_deref().map(|p| self.resolve(p))
    }

    pub fn video_dir(&self, video_id: &str) -> PathBuf {
        self.resolve(&self.videos).join(video_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub source: PriorSource,
    pub sampling: SamplingMode,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            source: PriorSource::Attention,
            sampling: SamplingMode::Deterministic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub cost: CostWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply by `gamma` at each listed epoch.
    Step { gamma: f64, at_epoch: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            epochs: 12,
            batch_size: 16,
            schedule: LrSchedule::Constant,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Step { gamma, at_epoch } if epoch >= at_epoch => self.lr * gamma,
            LrSchedule::Step { .. } => self.lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Everything trains, including the alignment head.
    #[default]
    E2e,
    /// Zero-shot recognition on top of trained localization: λ pinned to 1
    /// and the alignment head frozen.
    ZsrTl,
}

impl FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e2e" => Ok(TrainingMode::E2e),
            "zsr_tl" => Ok(TrainingMode::ZsrTl),
            _ => Err(config_err!("unknown training mode `{s}` (expected e2e or zsr_tl)")),
        }
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingMode::E2e => "e2e",
            TrainingMode::ZsrTl => "zsr_tl",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Keep at most this many classes per kept box, by probability.
    pub top_classes: usize,
    /// Per-frame, per-class suppression of overlapping boxes; off when `None`.
    pub nms_iou: Option<f64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            top_classes: 5,
            nms_iou: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Single-threaded gradient computation.
    pub deterministic: bool,
    pub training_mode: TrainingMode,
    pub fusion: FusionMode,
    pub data: DataConfig,
    pub backend: BackendConfig,
    pub model: HeadConfig,
    pub prior: PriorConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub eval: EvalProtocol,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: false,
            training_mode: TrainingMode::E2e,
            fusion: FusionMode::Dynamic,
            data: DataConfig::default(),
            backend: BackendConfig::default(),
            model: HeadConfig::default(),
            prior: PriorConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalProtocol::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML; a relative `data.root` is taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            let line = e.span().map_or(1, |s| text[..s.start].lines().count().max(1));
            Error::schema(path, line, e.message().to_string())
        })?;
        if cfg.data.root.is_relative() {
            let dir = path.parent().unwrap_or(Path::new(""));
            cfg.data.root = dir.join(&cfg.data.root);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Desk-scale settings for the synthetic moving-shapes set: a small head
    /// (20 queries, 3 stages) over the toy backend, trained on every frame.
    pub fn synthetic(synth: &SynthConfig) -> Self {
        let mut cfg = RunConfig::default();
        cfg.backend.patch_size = 8;
        cfg.backend.dim = 16;
        cfg.backend.grounding = synth.grounding();
        cfg.backend.person_gain = 2.0;
        cfg.data.clip_len = 8;
        cfg.data.keyframe_step = 1;
        cfg.model = HeadConfig {
            num_queries: 20,
            num_stages: 3,
            d_q: 32,
            heads: 4,
            qv_points: 8,
            qv_out_points: 8,
            qv_out_channels: 8,
            pyramid_channels: 8,
            ..HeadConfig::default()
        };
        cfg.optim.lr = 1e-3;
        cfg.optim.epochs = 30;
        cfg.optim.batch_size = 8;
        cfg.inference.nms_iou = Some(0.5);
        cfg
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err!("cannot serialize config: {e}"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Fusion actually used, after the training mode is applied.
    pub fn effective_fusion(&self) -> FusionMode {
        match self.training_mode {
            TrainingMode::ZsrTl => FusionMode::Fixed(1.0),
            TrainingMode::E2e => self.fusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.eval.validate()?;
        let o = &self.optim;
        let positive = [
            ("optim.lr", o.lr),
            ("optim.eps", o.eps),
            ("optim.clip_norm", o.clip_norm),
            ("loss.weights.w_set", self.loss.weights.w_set),
            ("loss.weights.w_act", self.loss.weights.w_act),
            ("data.frame_rate", self.data.frame_rate),
            ("backend.temperature", self.backend.temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err!("{name} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("optim.weight_decay", o.weight_decay),
            ("loss.cost.score", self.loss.cost.score),
            ("loss.cost.l1", self.loss.cost.l1),
            ("loss.cost.giou", self.loss.cost.giou),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(config_err!("optimizer betas must lie in [0, 1)"));
        }
        for (name, v) in [
            ("optim.epochs", o.epochs),
            ("optim.batch_size", o.batch_size),
            ("data.clip_len", self.data.clip_len),
            ("data.stride", self.data.stride),
            ("data.keyframe_step", self.data.keyframe_step),
            ("inference.top_classes", self.inference.top_classes),
        ] {
            if v == 0 {
                return Err(config_err!("{name} must be positive"));
            }
        }
        if let Some(t) = self.inference.nms_iou {
            if !(t > 0.0 && t <= 1.0) {
                return Err(config_err!("inference.nms_iou must lie in (0, 1], got {t}"));
            }
        }
        if let LrSchedule::Step { gamma, .. } = o.schedule {
            if !(gamma > 0.0) {
                return Err(config_err!("lr schedule gamma must be positive"));
            }
        }
        Ok(())
    }
}
