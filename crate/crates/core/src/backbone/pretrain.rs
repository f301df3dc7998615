use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{Confusion, Dataset, LabelMap};
use crate::error::{Error, Result};
use crate::framework::{PretrainConfig, SegHead};
use crate::numerics::{absorb_grads, seeded, Parameter, Sgd, Tape};
use rand::seq::SliceRandom;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    /// Source validation mIoU before and after training.
    pub initial_miou: f64,
    pub final_miou: f64,
}

fn source_miou(bb: &Backbone, head: &SegHead, data: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = data.val_indices().collect();
    if idx.is_empty() {
        return Ok(0.0);
    }
    let mut conf = Confusion::new(head.classes());
    for chunk in idx.chunks(16) {
        let (images, labels) = data.batch(chunk)?;
        let (_, _, h, w) = images.dims4()?;
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let f = bb.forward(&mut tape, x)?;
        let logits = head.forward(&mut tape, f, h, w)?;
        conf.accumulate(&LabelMap::argmax(tape.value(logits), None)?, &labels, None)?;
    }
    Ok(conf.report().mean)
}

/// Trains `backbone` together with a throwaway head on the source task,
/// then freezes it and records where its weights came from.
pub fn pretrain_source(backbone: &mut Backbone, source: &Dataset, cfg: &PretrainConfig) -> Result<PretrainReport> {
    if backbone.frozen {
        return Err(Error::Frozen);
    }
    let train: Vec<usize> = source.train_indices().collect();
    if train.is_empty() && cfg.steps > 0 {
        return Err(Error::Empty("source training split"));
    }
    let mut rng = seeded(cfg.seed);
    let n = backbone.num_stages();
    let mut head = SegHead::new("source_head", backbone.channels_at(n), 64, source.spec.classes, &mut rng)?;
    let initial_miou = source_miou(backbone, &head, source)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    opt.clip_norm = cfg.clip_norm;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch.max(1) {
            if cursor == order.len() {
                order = train.clone();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let (images, labels) = source.batch(&idx)?;
        let (_, _, h, w) = images.dims4()?;
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let f = backbone.forward(&mut tape, x)?;
        let logits = head.forward(&mut tape, f, h, w)?;
        let loss = tape.cross_entropy_logits(logits, &labels.labels, None)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("pretraining step {step}")));
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        let mut params: Vec<&mut Parameter> = backbone.params_mut();
        params.extend(head.params_mut());
        absorb_grads(params.iter_mut().map(|p| &mut **p), &grads);
        opt.step(params)?;
    }
    let final_miou = source_miou(backbone, &head, source)?;
    backbone.freeze();
    backbone.provenance = format!(
        "pretrained source_seed={} texture={} steps={} seed={}",
        source.spec.seed, source.spec.texture, cfg.steps, cfg.seed
    );
    Ok(PretrainReport { steps: cfg.steps, losses, initial_miou, final_miou })
}
