use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Confusion, Dataset, LabelMap};
use crate::error::{Error, Result};
use crate::framework::{total_loss, ForwardOutput, Group, LossSpec, StagePipeline, Strategy, TrainConfig};
use crate::numerics::{absorb_grads, seeded, Sgd, Tape};
use crate::tensor::Tensor;

/// One line of the report stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Foreground (class 1) Dice, reported for two-class tasks.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub final_metrics: Option<EvalMetrics>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Argmax predictions for `indices`, evaluated in chunks of `batch`.
pub fn predict(pipe: &StagePipeline, data: &Dataset, indices: &[usize], batch: usize) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch.max(1)) {
        let (images, _) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let fwd = pipe.forward(&mut tape, x)?;
        let pred = LabelMap::argmax(tape.value(fwd.logits), None)?;
        let plane = pred.h * pred.w;
        for b in 0..pred.n {
            out.push(LabelMap::new(1, pred.h, pred.w, pred.classes, None, pred.labels[b * plane..(b + 1) * plane].to_vec())?);
        }
    }
    Ok(out)
}

pub fn evaluate(pipe: &StagePipeline, data: &Dataset, indices: &[usize], batch: usize, ignore: Option<u32>) -> Result<EvalMetrics> {
    if indices.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let k = pipe.classes();
    let preds = predict(pipe, data, indices, batch)?;
    let mut conf = Confusion::new(k);
    for (pred, &i) in preds.iter().zip(indices) {
        conf.accumulate(pred, &data.samples[i].label, ignore)?;
    }
    let report = conf.report();
    let dice = (k == 2).then(|| {
        let tp = conf.get(1, 1);
        crate::data::metrics::dice_from_counts(tp, conf.get(0, 1), conf.get(1, 0))
    });
    Ok(EvalMetrics { miou: report.mean, per_class_iou: report.per_class, dice })
}

/// Final backbone features per sample. Under head tuning nothing before the
/// head trains, so these are computed once instead of every step; per-sample
/// kernels make them bitwise equal to in-batch features.
fn trunk_features(pipe: &StagePipeline, data: &Dataset, indices: &[usize], batch: usize) -> Result<HashMap<usize, Tensor>> {
    let mut unique = indices.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let mut out = HashMap::with_capacity(unique.len());
    for chunk in unique.chunks(batch.max(1)) {
        let (images, _) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let f = pipe.backbone.forward(&mut tape, x)?;
        let f = tape.value(f);
        for (k, &i) in chunk.iter().enumerate() {
            out.insert(i, f.batch_item(k)?);
        }
    }
    Ok(out)
}

/// SGD over `train_indices`, reshuffled each epoch from `cfg.seed`. `sink`
/// receives every record as it is produced. Evaluation uses `eval_indices`
/// every `cfg.eval_every` steps and after the last step.
pub fn train(
    pipe: &mut StagePipeline,
    data: &Dataset,
    train_indices: &[usize],
    eval_indices: &[usize],
    loss_spec: &LossSpec,
    cfg: &TrainConfig,
    mut sink: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainReport> {
    if train_indices.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if cfg.batch == 0 {
        return Err(Error::config("train.batch", "must be positive"));
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    opt.clip_norm = cfg.clip_norm;
    let mut rng = seeded(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut records = Vec::with_capacity(cfg.steps);
    let eval = |pipe: &StagePipeline| -> Result<Option<EvalMetrics>> {
        if eval_indices.is_empty() {
            return Ok(None);
        }
        evaluate(pipe, data, eval_indices, cfg.batch.max(8), loss_spec.ignore_index).map(Some)
    };
    let mut last_metrics = None;
    let cache = if cfg.cache_features && pipe.strategy == Strategy::Head {
        Some(trunk_features(pipe, data, train_indices, cfg.batch)?)
    } else {
        None
    };

    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch {
            if cursor == order.len() {
                order = train_indices.to_vec();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let (images, labels) = data.batch(&idx)?;
        let mut tape = Tape::new();
        let fwd = match &cache {
            Some(feats) => {
                let f = Tensor::stack_batch(&idx.iter().map(|i| feats[i].clone()).collect::<Vec<_>>())?;
                let f = tape.constant(f);
                ForwardOutput { logits: pipe.head.forward(&mut tape, f, labels.h, labels.w)?, interim: Vec::new() }
            }
            None => {
                let x = tape.constant(images);
                pipe.forward(&mut tape, x)?
            }
        };
        let loss = total_loss(&mut tape, fwd.logits, &fwd.interim, &labels, loss_spec)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            let what = tape.first_non_finite().unwrap_or_else(|| "loss".into());
            return Err(Error::NonFinite(format!("step {step}: {what}")));
        }
        let grads = tape.backward(loss)?;
        let mult = cfg.prompt_lr_mult;
        let mut params: Vec<_> = pipe.params_mut().into_iter().filter(|(_, p)| p.trainable).collect();
        absorb_grads(params.iter_mut().map(|(_, p)| &mut **p), &grads);
        for (_, p) in params.iter_mut() {
            // a trainable tensor that never entered the tape gets a zero update
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
        opt.step_scaled(params.into_iter().map(|(g, p)| (p, if g == Group::Prompt { mult } else { 1.0 })))?;
        if let Some((g, p)) = pipe.grouped_params().into_iter().find(|(_, p)| p.trainable && !p.value.is_finite()) {
            return Err(Error::NonFinite(format!("step {step}: {g:?} tensor `{}` after update", p.name)));
        }

        let mut rec = StepRecord { step, loss: value, miou: None, dice: None };
        let last = step + 1 == cfg.steps;
        if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            if let Some(m) = eval(pipe)? {
                rec.miou = Some(m.miou);
                rec.dice = m.dice;
                last_metrics = Some(m);
            }
        }
        sink(&rec)?;
        records.push(rec);
    }
    if cfg.steps == 0 {
        last_metrics = eval(pipe)?;
    }
    Ok(TrainReport { records, final_metrics: last_metrics })
}
