use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::framework::{BlockModuleConfig, HeadConfig, LossSpec, Strategy};
use crate::spm::{SpmConfig, DEFAULT_DILATIONS};

pub const DEFAULT_CLIP_NORM: f64 = 2.0;

/// SPM placement and shape, as written in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpmSection {
    /// Insertion points in `1..=N+1`; point `N+1` sits before the head.
    pub stages: Vec<usize>,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "R")]
    pub iterations: usize,
    pub pdc_groups: Option<usize>,
    pub dilations: [usize; 4],
    pub pointwise_groups: usize,
    pub pdc_relu: bool,
}

impl Default for SpmSection {
    fn default() -> Self {
        let base = SpmConfig::default();
        SpmSection {
            stages: vec![1, 2, 3, 4],
            channels: base.channels,
            iterations: 1,
            pdc_groups: None,
            dilations: DEFAULT_DILATIONS,
            pointwise_groups: base.pointwise_groups,
            pdc_relu: base.pdc_relu,
        }
    }
}

impl SpmSection {
    pub fn spm_config(&self) -> SpmConfig {
        SpmConfig {
            channels: self.channels,
            pdc_groups: self.pdc_groups,
            dilations: self.dilations,
            pointwise_groups: self.pointwise_groups,
            pdc_relu: self.pdc_relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
    /// Evaluate on the validation split every this many steps (0 = only at the end).
    pub eval_every: usize,
    /// Learning-rate multiplier for prompt parameters.
    pub prompt_lr_mult: f64,
    /// Global gradient-norm bound; `null` disables clipping.
    pub clip_norm: Option<f64>,
    /// Head tuning only: compute frozen backbone features once. Results are
    /// bitwise identical either way.
    pub cache_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            lr: 0.05,
            momentum: 0.9,
            batch: 4,
            seed: 0,
            eval_every: 0,
            prompt_lr_mult: 1.0,
            clip_norm: Some(DEFAULT_CLIP_NORM),
            cache_features: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub source: SynthSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 500, lr: 0.05, momentum: 0.9, batch: 4, seed: 0, clip_norm: Some(DEFAULT_CLIP_NORM), source: SynthSpec::source() }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub spm: SpmSection,
    pub strategy: Strategy,
    pub head: HeadConfig,
    /// Side / adapter module shape.
    pub modules: BlockModuleConfig,
    pub loss: LossSpec,
    pub train: TrainConfig,
    pub data: SynthSpec,
    /// `None` keeps the randomly initialized backbone.
    pub pretrain: Option<PretrainConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default(),
            spm: SpmSection::default(),
            strategy: Strategy::PromptMatched,
            head: HeadConfig::default(),
            modules: BlockModuleConfig::default(),
            loss: LossSpec::default(),
            train: TrainConfig::default(),
            data: SynthSpec::default(),
            pretrain: Some(PretrainConfig::default()),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that can be checked without building tensors.
    pub fn validate(&self) -> Result<()> {
        let n = self.backbone.num_stages();
        if self.spm.iterations < 1 {
            return Err(Error::config("spm.R", "need at least one recurrent iteration"));
        }
        if self.spm.channels == 0 || self.spm.channels % 4 != 0 {
            return Err(Error::config("spm.C", "must be a positive multiple of 4"));
        }
        if let Some(&bad) = self.spm.stages.iter().find(|&&s| s == 0 || s > n + 1) {
            return Err(Error::config("spm.stages", format!("insertion point {bad} outside 1..={}", n + 1)));
        }
        let mut sorted = self.spm.stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.spm.stages.len() {
            return Err(Error::config("spm.stages", "duplicate insertion point"));
        }
        if self.spm.dilations.contains(&0) {
            return Err(Error::config("spm.dilations", "must be positive"));
        }
        if self.strategy == Strategy::PromptMatched {
            if let Some(&p) = self.spm.stages.iter().find(|&&p| p > self.loss.weights.len()) {
                return Err(Error::config("loss.weights", format!("no weight for insertion point {p}")));
            }
        }
        self.loss.validate()?;
        if self.train.batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            return Err(Error::config("train.lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.train.prompt_lr_mult.is_finite() && self.train.prompt_lr_mult >= 0.0) {
            return Err(Error::config("train.prompt_lr_mult", "must be finite and non-negative"));
        }
        if self.head.channels == 0 {
            return Err(Error::config("head.channels", "must be positive"));
        }
        self.data.validate()?;
        if self.data.train == 0 {
            return Err(Error::config("data.train", "training split is empty"));
        }
        if let Some(p) = &self.pretrain {
            p.source.validate()?;
            if p.batch == 0 {
                return Err(Error::config("pretrain.batch", "must be positive"));
            }
        }
        Ok(())
    }
}
