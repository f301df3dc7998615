//! Attention-free token-mixing transformer operating on its patch grid.

use rand::Rng;

use crate::backbone::{Backbone, BackboneConfig, Stage, Stem, Unit};
use crate::error::{Error, Result};
use crate::numerics::{seeded, ConvLayer, Parameter, Tape, Var};
use crate::tensor::Tensor;

/// `x + mix(x)` across tokens, then `x + fc2(relu(fc1(x)))` across channels.
#[derive(Clone, Debug)]
pub struct MixerBlock {
    pub channels: usize,
    pub token_weight: Parameter,
    pub token_bias: Parameter,
    pub fc1: ConvLayer,
    pub fc2: ConvLayer,
}

impl MixerBlock {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.token_weight);
        let b = tape.param(&self.token_bias);
        let m = tape.token_mix(x, w, b)?;
        let x = tape.add(x, m)?;
        let h = self.fc1.forward(tape, x)?;
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, h)?;
        tape.add(x, h)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.token_weight, &self.token_bias];
        out.extend(self.fc1.params());
        out.extend(self.fc2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.token_weight, &mut self.token_bias];
        out.extend(self.fc1.params_mut());
        out.extend(self.fc2.params_mut());
        out
    }
}

/// `layers` mixer blocks split evenly into `stages` stages over an
/// `image_size/patch` token grid.
pub fn build_toy_vit(
    embed_dim: usize,
    layers: usize,
    patch: usize,
    stages: usize,
    image_size: usize,
    seed: u64,
) -> Result<Backbone> {
    if embed_dim == 0 || layers == 0 || patch == 0 || stages == 0 {
        return Err(Error::config("backbone", "embed_dim, layers, patch and stages must be positive"));
    }
    if layers % stages != 0 {
        return Err(Error::config("backbone.stages", format!("{layers} layers do not split evenly into {stages} stages")));
    }
    if image_size % patch != 0 {
        return Err(Error::config("backbone.patch", format!("image size {image_size} not divisible by patch {patch}")));
    }
    let grid = image_size / patch;
    let tokens = grid * grid;
    let mut rng = seeded(seed);
    let embed = ConvLayer::same("backbone.embed", 3 * patch * patch, embed_dim, 1, 1, 1, &mut rng)?;
    let per = layers / stages;
    let bound = (1.0 / tokens as f64).sqrt();
    let stages = (0..stages)
        .map(|s| {
            let units = (0..per)
                .map(|b| {
                    let name = format!("backbone.s{}.b{b}", s + 1);
                    let token_weight = Tensor::from_fn(&[tokens, tokens], |_| rng.gen_range(-bound..bound));
                    let mut fc2 = ConvLayer::same(&format!("{name}.fc2"), embed_dim, embed_dim, 1, 1, 1, &mut rng)?;
                    fc2.weight.value = fc2.weight.value.map(|v| v * 0.5);
                    Ok(Unit::Mixer(MixerBlock {
                        channels: embed_dim,
                        token_weight: Parameter::new(format!("{name}.token.weight"), token_weight),
                        token_bias: Parameter::new(format!("{name}.token.bias"), Tensor::zeros(&[tokens])),
                        fc1: ConvLayer::same(&format!("{name}.fc1"), embed_dim, embed_dim, 1, 1, 1, &mut rng)?,
                        fc2,
                    }))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Stage { units, in_channels: embed_dim, out_channels: embed_dim, stride: 1 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Backbone {
        config: BackboneConfig::Vit { embed_dim, layers, patch, stages: layers / per, image_size, seed },
        stem: Stem::Patch { patch, embed },
        stages,
        frozen: false,
        provenance: format!("random-init seed={seed}"),
    })
}

/// `N×T×C` token sequence to `N×C×gh×gw` grid (row-major token order).
pub fn tokens_to_grid(tokens: &Tensor, gh: usize, gw: usize) -> Result<Tensor> {
    let [n, t, c] = tokens.shape()[..] else {
        return Err(Error::shape("tokens_to_grid", format!("expected rank 3, got {:?}", tokens.shape())));
    };
    if t != gh * gw {
        return Err(Error::shape("tokens_to_grid", format!("{t} tokens vs {gh}x{gw} grid")));
    }
    let mut out = vec![0.0; tokens.numel()];
    for b in 0..n {
        for ti in 0..t {
            for ch in 0..c {
                out[(b * c + ch) * t + ti] = tokens.data()[(b * t + ti) * c + ch];
            }
        }
    }
    Tensor::new(vec![n, c, gh, gw], out)
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens(grid: &Tensor) -> Result<Tensor> {
    let (n, c, gh, gw) = grid.dims4()?;
    let t = gh * gw;
    let mut out = vec![0.0; grid.numel()];
    for b in 0..n {
        for ch in 0..c {
            for ti in 0..t {
                out[(b * t + ti) * c + ch] = grid.data()[(b * c + ch) * t + ti];
            }
        }
    }
    Tensor::new(vec![n, t, c], out)
}
