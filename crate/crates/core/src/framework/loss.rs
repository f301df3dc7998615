use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

pub const DEFAULT_STAGE_WEIGHTS: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.4];

/// Per-insertion-point weights of the interim-map terms. Each weight is
/// divided by `R`, so a point's summed interim weight does not depend on `R`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    pub weights: Vec<f64>,
    pub ignore_index: Option<u32>,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec { weights: DEFAULT_STAGE_WEIGHTS.to_vec(), ignore_index: None }
    }
}

impl LossSpec {
    pub fn without_interim(&self) -> Self {
        LossSpec { weights: vec![0.0; self.weights.len()], ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config(format!("loss.weights[{i}]"), "must be finite and non-negative"));
        }
        Ok(())
    }

    /// `a_point / R`.
    pub fn weight(&self, point: usize, iterations: usize) -> Result<f64> {
        let a = point
            .checked_sub(1)
            .and_then(|i| self.weights.get(i))
            .ok_or_else(|| Error::config("loss.weights", format!("no weight for insertion point {point}")))?;
        Ok(a / iterations as f64)
    }
}

/// `CE(logits, y) + Σ_points Σ_r (a_point/R)·CE(resize(M_point^r), y)`.
/// Interim maps are upsampled to the label resolution. Terms with zero
/// weight are skipped.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    interim: &[(usize, Vec<Var>)],
    target: &LabelMap,
    spec: &LossSpec,
) -> Result<Var> {
    let mut loss = tape.cross_entropy_logits(logits, &target.labels, spec.ignore_index)?;
    for (point, maps) in interim {
        let a = spec.weight(*point, maps.len().max(1))?;
        if a == 0.0 {
            continue;
        }
        for &m in maps {
            let up = tape.bilinear_resize(m, target.h, target.w)?;
            let ce = tape.cross_entropy_probs(up, &target.labels, spec.ignore_index)?;
            let term = tape.scale(ce, a);
            loss = tape.add(loss, term)?;
        }
    }
    Ok(loss)
}
