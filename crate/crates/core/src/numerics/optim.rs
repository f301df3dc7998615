use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::layers::Parameter;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum: `v <- m·v + g; p <- p - lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescales the combined gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config("lr", "must be a finite non-negative rate"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        Ok(Sgd { lr, momentum, weight_decay: 0.0, clip_norm: None, velocity: HashMap::new() })
    }

    /// Updates every parameter in place and clears its gradient. All
    /// parameters must carry a gradient; nothing is modified otherwise.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        self.step_scaled(params.into_iter().map(|p| (p, 1.0)))
    }

    /// Like [`Sgd::step`] with a per-parameter learning-rate multiplier.
    pub fn step_scaled<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a mut Parameter, f64)>,
    ) -> Result<()> {
        let params: Vec<_> = params.into_iter().collect();
        if let Some((p, _)) = params.iter().find(|(p, _)| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        let clip = match self.clip_norm {
            Some(max) => {
                let norm = params
                    .iter()
                    .flat_map(|(p, _)| p.grad.as_ref().expect("checked above").data())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        for (p, mult) in params {
            let grad = p.grad.take().expect("checked above");
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let lr = self.lr * mult;
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(grad.data()).zip(p.value.data_mut()) {
                *vi = self.momentum * *vi + clip * gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}
