//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct InputReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Elements skipped as non-differentiable (see [`gradcheck_skip_kinks`]).
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn eval<F>(f: &F, inputs: &[(String, Tensor)], requires_grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone(), requires_grad)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::NonScalarLoss(tape.value(out).shape().to_vec()));
    }
    Ok((tape, vars, out))
}

/// Compares the tape's gradient of scalar `f` with respect to each named
/// input against `(f(x+eps) - f(x-eps)) / (2·eps)`, element by element.
pub fn gradcheck<F>(f: F, inputs: &[(String, Tensor)], eps: f64, rel_tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    run(f, inputs, eps, rel_tol, None)
}

/// Relative disagreement between the one-sided slopes above which an
/// element is treated as sitting on a kink.
pub const KINK_TOL: f64 = 1e-2;

/// Like [`gradcheck`], but skips elements where the forward and backward
/// one-sided slopes disagree by more than [`KINK_TOL`]: the probe straddles a
/// ReLU kink, where no derivative exists to compare against. Smooth
/// curvature moves the slopes apart by only O(eps).
pub fn gradcheck_skip_kinks<F>(f: F, inputs: &[(String, Tensor)], eps: f64, rel_tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    run(f, inputs, eps, rel_tol, Some(KINK_TOL))
}

fn run<F>(f: F, inputs: &[(String, Tensor)], eps: f64, rel_tol: f64, kink_tol: Option<f64>) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = eval(&f, inputs, true)?;
    let center = tape.value(out).item();
    let grads = tape.backward(out)?;
    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<(String, Tensor)> = inputs.to_vec();
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut worst = 0.0_f64;
        let mut skipped = 0;
        for i in 0..t.numel() {
            let orig = t.data()[i];
            work[k].1.data_mut()[i] = orig + eps;
            let (tp, _, op) = eval(&f, &work, false)?;
            let plus = tp.value(op).item();
            work[k].1.data_mut()[i] = orig - eps;
            let (tm, _, om) = eval(&f, &work, false)?;
            let minus = tm.value(om).item();
            work[k].1.data_mut()[i] = orig;
            if let Some(kt) = kink_tol {
                if rel_error((plus - center) / eps, (center - minus) / eps) > kt {
                    skipped += 1;
                    continue;
                }
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(analytic.data()[i], numeric);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        reports.push(InputReport { name: name.clone(), max_rel_error: worst, skipped, passed: worst < rel_tol });
    }
    let passed = reports.iter().all(|r| r.passed);
    Ok(GradcheckReport { inputs: reports, passed })
}
