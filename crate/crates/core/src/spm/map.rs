use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel channel sums must lie within this distance of 1.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// `N×K×H×W` per-pixel class distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMap(Tensor);

impl SemanticMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let (_, k, _, _) = t.dims4()?;
        if k < 2 {
            return Err(Error::shape("semantic_map", "need at least 2 classes"));
        }
        if let Some(worst) = Self::simplex_violation(&t) {
            return Err(Error::shape("semantic_map", format!("not on the simplex (deviation {worst:e})")));
        }
        Ok(SemanticMap(t))
    }

    /// Largest per-pixel deviation when some pixel leaves the simplex.
    pub fn simplex_violation(t: &Tensor) -> Option<f64> {
        let (n, k, h, w) = t.dims4().ok()?;
        let plane = h * w;
        let d = t.data();
        let mut worst: Option<f64> = None;
        for b in 0..n {
            for px in 0..plane {
                let mut sum = 0.0;
                let mut negative = false;
                for c in 0..k {
                    let v = d[(b * k + c) * plane + px];
                    negative |= v < 0.0 || !v.is_finite();
                    sum += v;
                }
                let dev = (sum - 1.0).abs();
                if negative || !(dev <= SIMPLEX_TOL) {
                    let dev = if negative { f64::INFINITY } else { dev };
                    worst = Some(worst.map_or(dev, |w| w.max(dev)));
                }
            }
        }
        worst
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Empirical class frequencies of a label set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub probs: Vec<f64>,
}

impl ClassPrior {
    pub fn uniform(classes: usize) -> Self {
        ClassPrior { probs: vec![1.0 / classes as f64; classes] }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.probs.iter().sum();
        if self.probs.len() < 2 || self.probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("prior", "class prior must be a distribution over at least 2 classes"));
        }
        Ok(())
    }
}

/// `probs[c] = #pixels labeled c / #non-ignored pixels`.
pub fn class_prior<'a>(
    labels: impl IntoIterator<Item = &'a LabelMap>,
    classes: usize,
    ignore_index: Option<u32>,
) -> Result<ClassPrior> {
    let mut counts = vec![0u64; classes];
    for map in labels {
        for &l in &map.labels {
            if Some(l) == ignore_index {
                continue;
            }
            *counts.get_mut(l as usize).ok_or(Error::Label { label: l, classes })? += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("class prior needs at least one labeled pixel"));
    }
    Ok(ClassPrior { probs: counts.iter().map(|&c| c as f64 / total as f64).collect() })
}

/// Spatially uniform map equal to the prior at every pixel.
pub fn init_m0(prior: &ClassPrior, n: usize, h: usize, w: usize) -> Result<SemanticMap> {
    prior.validate()?;
    let k = prior.probs.len();
    let plane = h * w;
    let t = Tensor::from_fn(&[n, k, h, w], |i| prior.probs[(i / plane) % k]);
    SemanticMap::new(t)
}
