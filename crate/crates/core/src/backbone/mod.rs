//! Stage-partitioned feature extractors.
//!
//! A [`Backbone`] is an embedding stem followed by `N` stages. Stage `i`
//! maps the stem output (for `i = 1`) or the previous stage output to its own
//! output; prompt matchers are inserted only at these boundaries.

mod cnn;
mod pretrain;
mod vit;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{checkpoint, ConvLayer, Parameter, Tape, Var};
use crate::tensor::Tensor;

pub use cnn::{build_toy_cnn, ResidualBlock};
pub use pretrain::{pretrain_source, PretrainReport};
pub use vit::{build_toy_vit, grid_to_tokens, tokens_to_grid, MixerBlock};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    Cnn {
        channels: Vec<usize>,
        depths: Vec<usize>,
        seed: u64,
    },
    Vit {
        embed_dim: usize,
        layers: usize,
        patch: usize,
        stages: usize,
        image_size: usize,
        seed: u64,
    },
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::Cnn { channels: vec![32, 64, 128, 256], depths: vec![2; 4], seed: 0 }
    }
}

impl BackboneConfig {
    pub fn vit_default() -> Self {
        BackboneConfig::Vit { embed_dim: 64, layers: 12, patch: 8, stages: 4, image_size: 64, seed: 0 }
    }

    pub fn num_stages(&self) -> usize {
        match self {
            BackboneConfig::Cnn { channels, .. } => channels.len(),
            BackboneConfig::Vit { stages, .. } => *stages,
        }
    }

    pub fn build(&self) -> Result<Backbone> {
        match self {
            BackboneConfig::Cnn { channels, depths, seed } => build_toy_cnn(channels, depths, *seed),
            BackboneConfig::Vit { embed_dim, layers, patch, stages, image_size, seed } => {
                build_toy_vit(*embed_dim, *layers, *patch, *stages, *image_size, *seed)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum Stem {
    /// Strided convolution, fixed per-channel affine, rectifier.
    Conv { conv: ConvLayer, scale: Vec<f64>, shift: Vec<f64> },
    /// Non-overlapping patches folded into channels, then a pointwise embedding.
    Patch { patch: usize, embed: ConvLayer },
}

#[derive(Clone, Debug)]
pub enum Unit {
    Residual(ResidualBlock),
    Mixer(MixerBlock),
}

impl Unit {
    pub fn in_channels(&self) -> usize {
        match self {
            Unit::Residual(b) => b.conv1.in_channels,
            Unit::Mixer(m) => m.channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Unit::Residual(b) => b.conv2.out_channels,
            Unit::Mixer(m) => m.channels,
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            Unit::Residual(b) => b.conv1.geom.stride,
            Unit::Mixer(_) => 1,
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Unit::Residual(b) => b.forward(tape, x),
            Unit::Mixer(m) => m.forward(tape, x),
        }
    }

    fn params(&self) -> Vec<&Parameter> {
        match self {
            Unit::Residual(b) => b.params(),
            Unit::Mixer(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Unit::Residual(b) => b.params_mut(),
            Unit::Mixer(m) => m.params_mut(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub units: Vec<Unit>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Called around every unit; lets tuning strategies add side branches or
/// adapters without touching the frozen units themselves.
pub trait UnitHook {
    /// Returns the (possibly modified) unit output.
    fn after_unit(&self, tape: &mut Tape, stage: usize, unit: usize, input: Var, output: Var) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub frozen: bool,
    pub provenance: String,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    frozen: bool,
    provenance: String,
    config: BackboneConfig,
}

impl Backbone {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn in_channels(&self) -> usize {
        match &self.stem {
            Stem::Conv { conv, .. } => conv.in_channels,
            Stem::Patch { patch, embed } => embed.in_channels / (patch * patch),
        }
    }

    /// Channels of `F_i^out`; index 0 is the stem.
    pub fn channels_at(&self, i: usize) -> usize {
        if i == 0 {
            self.stages.first().map_or(0, |s| s.in_channels)
        } else {
            self.stages[i - 1].out_channels
        }
    }

    /// Spatial extent of `F_i^out` for a square input of side `size`.
    pub fn extent_at(&self, i: usize, size: usize) -> usize {
        let mut len = match &self.stem {
            Stem::Conv { conv, .. } => conv.geom.out_extent(size),
            Stem::Patch { patch, .. } => size / patch,
        };
        for s in &self.stages[..i] {
            len = len.div_ceil(s.stride);
        }
        len
    }

    fn run_stem(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = tape.value(x).dims4()?.1;
        if c != self.in_channels() {
            return Err(Error::shape("run_stage", format!("stem expects {} channels, got {c}", self.in_channels())));
        }
        match &self.stem {
            Stem::Conv { conv, scale, shift } => {
                let y = conv.forward(tape, x)?;
                let y = tape.channel_affine(y, scale, shift)?;
                Ok(tape.relu(y))
            }
            Stem::Patch { patch, embed } => {
                let y = tape.space_to_depth(x, *patch)?;
                embed.forward(tape, y)
            }
        }
    }

    /// Applies stage `i` (0 = stem) to `x`.
    pub fn run_stage(&self, tape: &mut Tape, i: usize, x: Var) -> Result<Var> {
        self.run_stage_hooked(tape, i, x, None)
    }

    pub fn run_stage_hooked(&self, tape: &mut Tape, i: usize, x: Var, hook: Option<&dyn UnitHook>) -> Result<Var> {
        if i == 0 {
            return self.run_stem(tape, x);
        }
        let stage = self.stages.get(i - 1).ok_or_else(|| {
            Error::shape("run_stage", format!("stage {i} out of range 0..={}", self.stages.len()))
        })?;
        let c = tape.value(x).dims4()?.1;
        if c != stage.in_channels {
            return Err(Error::shape("run_stage", format!("stage {i} expects {} channels, got {c}", stage.in_channels)));
        }
        let mut h = x;
        for (u, unit) in stage.units.iter().enumerate() {
            let out = unit.forward(tape, h)?;
            h = match hook {
                Some(hook) => hook.after_unit(tape, i, u, h, out)?,
                None => out,
            };
        }
        Ok(h)
    }

    /// Stem followed by every stage.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = self.run_stem(tape, x)?;
        for i in 1..=self.stages.len() {
            h = self.run_stage(tape, i, h)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = match &self.stem {
            Stem::Conv { conv, .. } => conv.params(),
            Stem::Patch { embed, .. } => embed.params(),
        };
        for s in &self.stages {
            for u in &s.units {
                out.extend(u.params());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = match &mut self.stem {
            Stem::Conv { conv, .. } => conv.params_mut(),
            Stem::Patch { embed, .. } => embed.params_mut(),
        };
        for s in &mut self.stages {
            for u in &mut s.units {
                out.extend(u.params_mut());
            }
        }
        out
    }

    /// Marks every tensor non-trainable.
    pub fn freeze(&mut self) {
        for p in self.params_mut() {
            p.trainable = false;
            p.grad = None;
        }
        self.frozen = true;
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        checkpoint::encode(self.params().into_iter().map(|p| (p.name.as_str(), &p.value)))
    }

    /// SHA-256 of the serialized tensors, lowercase hex.
    pub fn sha256(&self) -> Result<String> {
        Ok(crate::data::hex(&Sha256::digest(self.encode()?)))
    }

    /// Writes `<path>` (tensors) and `<path>.json` with the same basename.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        let sidecar = Sidecar { frozen: self.frozen, provenance: self.provenance.clone(), config: self.config.clone() };
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Backbone> {
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
        let mut bb = sidecar.config.build()?;
        load_named(bb.params_mut(), checkpoint::load(path)?)?;
        bb.provenance = sidecar.provenance;
        if sidecar.frozen {
            bb.freeze();
        }
        Ok(bb)
    }
}

/// Overwrites parameter values by name; every parameter must be present with a matching shape.
pub fn load_named<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, entries: Vec<(String, Tensor)>) -> Result<()> {
    let mut by_name: std::collections::HashMap<String, Tensor> = entries.into_iter().collect();
    for p in params {
        let t = by_name
            .remove(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "`{}` has shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    Ok(())
}
