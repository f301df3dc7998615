//! Semantic-aware prompt matcher.
//!
//! One matcher sits before a frozen stage. Each iteration first refines the
//! interim semantic map from the current feature and map, then turns the
//! feature and the refined map into a multiplicative prompt weight `W`, and
//! updates the feature as `F + F ⊗ W`. All iterations reuse one parameter set.

mod map;
mod pdc;
mod recognition;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ConvLayer, Parameter, Rng64, Tape, Var};

pub use map::{class_prior, init_m0, ClassPrior, SemanticMap, SIMPLEX_TOL};
pub use pdc::{default_pdc_groups, PdcParams};
pub use recognition::{class_vector_prior, spm_forward_recognition, RecognitionOutput, RecognitionParams};

pub const DEFAULT_DILATIONS: [usize; 4] = [1, 2, 3, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpmConfig {
    /// Reduced channel count `C` inside both branches.
    pub channels: usize,
    /// Groups of the PDC 3×3 layers; `None` picks [`default_pdc_groups`].
    pub pdc_groups: Option<usize>,
    pub dilations: [usize; 4],
    /// Groups of the 1×1 layers around each PDC.
    pub pointwise_groups: usize,
    /// Rectifier after each dilated convolution inside PDC.
    pub pdc_relu: bool,
}

impl Default for SpmConfig {
    fn default() -> Self {
        SpmConfig { channels: 256, pdc_groups: None, dilations: DEFAULT_DILATIONS, pointwise_groups: 1, pdc_relu: true }
    }
}

#[derive(Clone, Debug)]
pub struct SpmParams {
    pub feature_channels: usize,
    pub classes: usize,
    pub b1_in: ConvLayer,
    pub b1_pdc: PdcParams,
    pub b1_out: ConvLayer,
    pub b2_in: ConvLayer,
    pub b2_pdc: PdcParams,
    /// Produces the prompt weight; zero-initialized so a fresh matcher is the identity.
    pub b2_out: ConvLayer,
}

impl SpmParams {
    pub fn new(name: &str, feature_channels: usize, classes: usize, cfg: &SpmConfig, rng: &mut Rng64) -> Result<Self> {
        let c = cfg.channels;
        let pg = cfg.pointwise_groups;
        let groups = cfg.pdc_groups.unwrap_or_else(|| default_pdc_groups(c));
        let pw = |n: &str, i: usize, o: usize, g: usize, rng: &mut Rng64| ConvLayer::same(&format!("{name}.{n}"), i, o, 1, 1, g, rng);
        Ok(SpmParams {
            feature_channels,
            classes,
            b1_in: pw("b1_in", feature_channels + classes, c, pg, rng)?,
            b1_pdc: PdcParams::new(&format!("{name}.b1_pdc"), c, groups, cfg.dilations, cfg.pdc_relu, rng)?,
            b1_out: pw("b1_out", c, classes, 1, rng)?,
            b2_in: pw("b2_in", feature_channels + classes, c, pg, rng)?,
            b2_pdc: PdcParams::new(&format!("{name}.b2_pdc"), c, groups, cfg.dilations, cfg.pdc_relu, rng)?,
            b2_out: pw("b2_out", c, feature_channels, 1, rng)?.zeroed(),
        })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.b1_in.params();
        out.extend(self.b1_pdc.params());
        out.extend(self.b1_out.params());
        out.extend(self.b2_in.params());
        out.extend(self.b2_pdc.params());
        out.extend(self.b2_out.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.b1_in.params_mut();
        out.extend(self.b1_pdc.params_mut());
        out.extend(self.b1_out.params_mut());
        out.extend(self.b2_in.params_mut());
        out.extend(self.b2_pdc.params_mut());
        out.extend(self.b2_out.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn check_inputs(&self, tape: &Tape, f: Var, m: Var) -> Result<()> {
        let (n, cf, h, w) = tape.value(f).dims4()?;
        let (mn, k, mh, mw) = tape.value(m).dims4()?;
        if cf != self.feature_channels {
            return Err(Error::shape("spm", format!("feature has {cf} channels, matcher expects {}", self.feature_channels)));
        }
        if k != self.classes || (mn, mh, mw) != (n, h, w) {
            return Err(Error::shape(
                "spm",
                format!("map {:?} does not align with feature {:?}", tape.value(m).shape(), tape.value(f).shape()),
            ));
        }
        Ok(())
    }
}

/// `M' = softmax(conv1x1(PDC(conv1x1(F ⊕ M))))`. `m` must already match `f` spatially.
pub fn refine_map(tape: &mut Tape, f: Var, m: Var, p: &SpmParams) -> Result<Var> {
    p.check_inputs(tape, f, m)?;
    let x = tape.concat_channels(&[f, m])?;
    let x = p.b1_in.forward(tape, x)?;
    let x = p.b1_pdc.forward(tape, x)?;
    let logits = p.b1_out.forward(tape, x)?;
    tape.softmax_channels(logits)
}

#[derive(Clone, Copy, Debug)]
pub struct Prompted {
    pub feature: Var,
    pub prompt: Var,
    pub weight: Var,
}

/// `W = conv1x1(PDC(conv1x1(F ⊕ M)))`, `P = F ⊗ W`, `F' = F + P`.
pub fn generate_prompt(tape: &mut Tape, f: Var, m: Var, p: &SpmParams) -> Result<Prompted> {
    p.check_inputs(tape, f, m)?;
    let x = tape.concat_channels(&[f, m])?;
    let x = p.b2_in.forward(tape, x)?;
    let x = p.b2_pdc.forward(tape, x)?;
    let weight = p.b2_out.forward(tape, x)?;
    let prompt = tape.mul(f, weight)?;
    let feature = tape.add(f, prompt)?;
    Ok(Prompted { feature, prompt, weight })
}

/// One recurrent iteration: refine the map, then prompt the feature with it.
pub fn spm_step(tape: &mut Tape, f: Var, m: Var, p: &SpmParams) -> Result<(Var, Var)> {
    let refined = refine_map(tape, f, m, p)?;
    let prompted = generate_prompt(tape, f, refined, p)?;
    Ok((prompted.feature, refined))
}

#[derive(Clone, Debug)]
pub struct SpmOutput {
    pub feature: Var,
    pub map: Var,
    /// Refined map after each iteration, `R` entries.
    pub interim: Vec<Var>,
}

/// Runs `iterations` weight-shared steps. `m_prev` is bilinearly resized to
/// the feature's spatial size first.
pub fn spm_forward(tape: &mut Tape, f_prev: Var, m_prev: Var, p: &SpmParams, iterations: usize) -> Result<SpmOutput> {
    if iterations < 1 {
        return Err(Error::config("spm.R", "need at least one recurrent iteration"));
    }
    let (_, _, h, w) = tape.value(f_prev).dims4()?;
    let mut m = tape.bilinear_resize(m_prev, h, w)?;
    let mut f = f_prev;
    let mut interim = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        (f, m) = spm_step(tape, f, m, p)?;
        interim.push(m);
    }
    Ok(SpmOutput { feature: f, map: m, interim })
}
