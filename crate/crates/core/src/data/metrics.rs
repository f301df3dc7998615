use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};

/// Integer confusion counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion { classes, counts: vec![0; classes * classes] }
    }

    /// Adds every pixel whose ground truth is not `ignore_index`.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore_index: Option<u32>) -> Result<()> {
        pred.same_layout(gt)?;
        let k = self.classes;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if Some(g) == ignore_index {
                continue;
            }
            if g as usize >= k {
                return Err(Error::Label { label: g, classes: k });
            }
            if p as usize >= k {
                return Err(Error::Label { label: p, classes: k });
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn gt_total(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn pred_total(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }

    /// IoU per class; `None` when the class is absent from both prediction and ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let union = self.gt_total(c) + self.pred_total(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn report(&self) -> MiouReport {
        let per_class = self.iou();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        MiouReport { per_class, mean }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize, ignore_index: Option<u32>) -> Result<MiouReport> {
    let mut conf = Confusion::new(classes);
    conf.accumulate(pred, gt, ignore_index)?;
    Ok(conf.report())
}

/// `2·TP / (2·TP + FP + FN)` for `foreground`; 1.0 when both foregrounds are empty.
pub fn dice(pred: &LabelMap, gt: &LabelMap, foreground: u32) -> Result<f64> {
    pred.same_layout(gt)?;
    let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if gt.ignore_index == Some(g) {
            continue;
        }
        match (p == foreground, g == foreground) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    Ok(dice_from_counts(tp, fp, fne))
}

pub fn dice_from_counts(tp: u64, fp: u64, fne: u64) -> f64 {
    let denom = 2 * tp + fp + fne;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}
