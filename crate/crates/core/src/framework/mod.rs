//! The full prompted pipeline: frozen stages, interleaved matchers, head,
//! loss, tuning strategies and the training loop.

mod config;
mod head;
mod loss;
mod pipeline;
mod strategy;
mod train;

pub use config::{PretrainConfig, RunConfig, SpmSection, TrainConfig};
pub use head::{HeadConfig, SegHead};
pub use loss::{total_loss, LossSpec, DEFAULT_STAGE_WEIGHTS};
pub use pipeline::{ForwardOutput, Group, ParamCounts, StagePipeline};
pub use strategy::{build_block_modules, BlockModule, BlockModuleConfig, Strategy};
pub use train::{evaluate, predict, train, EvalMetrics, StepRecord, TrainReport};

use crate::backbone::{pretrain_source, Backbone};
use crate::data::Dataset;
use crate::error::Result;
use crate::spm::class_prior;

/// Builds the backbone a run config describes, pretraining it on the source
/// task when the config asks for that.
pub fn prepare_backbone(cfg: &RunConfig) -> Result<Backbone> {
    let mut bb = cfg.backbone.build()?;
    if let Some(p) = &cfg.pretrain {
        let source = crate::data::generate(&p.source)?;
        pretrain_source(&mut bb, &source, p)?;
    }
    Ok(bb)
}

/// Pipeline for `cfg` around `backbone`, with `M₀` from the training split of `data`.
pub fn build_pipeline(cfg: &RunConfig, backbone: Backbone, data: &Dataset) -> Result<StagePipeline> {
    let prior = class_prior(data.train_labels(), cfg.data.classes, cfg.loss.ignore_index)?;
    StagePipeline::new(cfg, backbone, prior)
}
