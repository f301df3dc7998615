//! Recognition-mode matcher: the interim semantic map becomes one class
//! probability vector per image, broadcast over space wherever branch inputs
//! need a map.

use crate::error::{Error, Result};
use crate::numerics::{ConvLayer, Parameter, Rng64, Tape, Var};
use crate::spm::{default_pdc_groups, ClassPrior, PdcParams, SpmConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RecognitionParams {
    pub feature_channels: usize,
    pub classes: usize,
    pub b1_in: ConvLayer,
    pub b1_pdc: PdcParams,
    /// Fully-connected layer on the pooled vector, as a 1×1 convolution.
    pub b1_fc: ConvLayer,
    pub b2_in: ConvLayer,
    pub b2_pdc: PdcParams,
    pub b2_out: ConvLayer,
}

impl RecognitionParams {
    /// Recognition matchers default to `C = 96`; pass a config to override.
    pub fn default_config() -> SpmConfig {
        SpmConfig { channels: 96, ..SpmConfig::default() }
    }

    pub fn new(name: &str, feature_channels: usize, classes: usize, cfg: &SpmConfig, rng: &mut Rng64) -> Result<Self> {
        let c = cfg.channels;
        let pg = cfg.pointwise_groups;
        let groups = cfg.pdc_groups.unwrap_or_else(|| default_pdc_groups(c));
        let pw = |n: &str, i: usize, o: usize, g: usize, rng: &mut Rng64| ConvLayer::same(&format!("{name}.{n}"), i, o, 1, 1, g, rng);
        Ok(RecognitionParams {
            feature_channels,
            classes,
            b1_in: pw("b1_in", feature_channels + classes, c, pg, rng)?,
            b1_pdc: PdcParams::new(&format!("{name}.b1_pdc"), c, groups, cfg.dilations, cfg.pdc_relu, rng)?,
            b1_fc: pw("b1_fc", c, classes, 1, rng)?,
            b2_in: pw("b2_in", feature_channels + classes, c, pg, rng)?,
            b2_pdc: PdcParams::new(&format!("{name}.b2_pdc"), c, groups, cfg.dilations, cfg.pdc_relu, rng)?,
            b2_out: pw("b2_out", c, feature_channels, 1, rng)?.zeroed(),
        })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.b1_in.params();
        out.extend(self.b1_pdc.params());
        out.extend(self.b1_fc.params());
        out.extend(self.b2_in.params());
        out.extend(self.b2_pdc.params());
        out.extend(self.b2_out.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.b1_in.params_mut();
        out.extend(self.b1_pdc.params_mut());
        out.extend(self.b1_fc.params_mut());
        out.extend(self.b2_in.params_mut());
        out.extend(self.b2_pdc.params_mut());
        out.extend(self.b2_out.params_mut());
        out
    }
}

/// `V₀` for a batch of `n`: image-level label frequencies, shaped `n×K×1×1`.
pub fn class_vector_prior(labels: &[u32], classes: usize, n: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::Empty("class vector prior needs at least one label"));
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        *counts.get_mut(l as usize).ok_or(Error::Label { label: l, classes })? += 1;
    }
    let prior = ClassPrior { probs: counts.iter().map(|&c| c as f64 / labels.len() as f64).collect() };
    prior.validate()?;
    Ok(Tensor::from_fn(&[n, classes, 1, 1], |i| prior.probs[i % classes]))
}

#[derive(Clone, Debug)]
pub struct RecognitionOutput {
    pub feature: Var,
    pub vector: Var,
    pub interim: Vec<Var>,
}

/// Runs `iterations` weight-shared recognition steps from `v_prev` (`N×K×1×1`).
pub fn spm_forward_recognition(
    tape: &mut Tape,
    f_prev: Var,
    v_prev: Var,
    p: &RecognitionParams,
    iterations: usize,
) -> Result<RecognitionOutput> {
    if iterations < 1 {
        return Err(Error::config("spm.R", "need at least one recurrent iteration"));
    }
    let (n, cf, h, w) = tape.value(f_prev).dims4()?;
    let vshape = tape.value(v_prev).shape().to_vec();
    if cf != p.feature_channels || vshape != [n, p.classes, 1, 1] {
        return Err(Error::shape(
            "spm_recognition",
            format!("feature {:?} / vector {vshape:?} do not fit the matcher", tape.value(f_prev).shape()),
        ));
    }
    let (mut f, mut v) = (f_prev, v_prev);
    let mut interim = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let map = tape.expand(v, h, w)?;
        let x = tape.concat_channels(&[f, map])?;
        let x = p.b1_in.forward(tape, x)?;
        let x = p.b1_pdc.forward(tape, x)?;
        let pooled = tape.global_max_pool(x)?;
        let logits = p.b1_fc.forward(tape, pooled)?;
        v = tape.softmax_channels(logits)?;
        interim.push(v);

        let map = tape.expand(v, h, w)?;
        let x = tape.concat_channels(&[f, map])?;
        let x = p.b2_in.forward(tape, x)?;
        let x = p.b2_pdc.forward(tape, x)?;
        let weight = p.b2_out.forward(tape, x)?;
        let prompt = tape.mul(f, weight)?;
        f = tape.add(f, prompt)?;
    }
    Ok(RecognitionOutput { feature: f, vector: v, interim })
}
