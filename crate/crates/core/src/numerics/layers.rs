use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::conv::ConvGeom;
use crate::numerics::tape::{Tape, Var};
use crate::tensor::Tensor;

pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A named tensor that may be trained.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter { name: name.into(), value, trainable: true, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Copies gradients from a finished backward pass onto the matching parameters.
pub fn absorb_grads<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    grads: &crate::numerics::tape::Gradients,
) {
    let by_name: std::collections::HashMap<&str, Option<&Tensor>> = grads.params().collect();
    for p in params {
        if !p.trainable {
            continue;
        }
        if let Some(Some(g)) = by_name.get(p.name.as_str()) {
            p.grad = Some((*g).clone());
        }
    }
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng64) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl ConvLayer {
    /// Stride-1 convolution with same padding, Kaiming-uniform weights and zero bias.
    pub fn same(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        groups: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::config(format!("{name}.kernel"), "same padding needs an odd kernel"));
        }
        Self::with_geom(name, in_channels, out_channels, ConvGeom::same(kernel, dilation, groups), rng)
    }

    /// Strided convolution with padding `(kernel-1)/2`; output extent is `ceil(len/stride)`.
    pub fn strided(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let geom = ConvGeom { kernel, stride, padding: (kernel - 1) / 2, dilation: 1, groups: 1 };
        Self::with_geom(name, in_channels, out_channels, geom, rng)
    }

    pub fn with_geom(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        rng: &mut Rng64,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || geom.kernel == 0 || geom.dilation == 0 || geom.stride == 0 {
            return Err(Error::config(name, "extents must be positive"));
        }
        if geom.groups == 0 || in_channels % geom.groups != 0 || out_channels % geom.groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("{name}: channels {in_channels}->{out_channels} not divisible by {} groups", geom.groups),
            ));
        }
        let cig = in_channels / geom.groups;
        let k = geom.kernel;
        let weight = kaiming_uniform(&[out_channels, cig, k, k], cig * k * k, rng);
        Ok(ConvLayer {
            in_channels,
            out_channels,
            geom,
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Some(Parameter::new(format!("{name}.bias"), Tensor::zeros(&[out_channels]))),
        })
    }

    /// Sets weight and bias to zero.
    pub fn zeroed(mut self) -> Self {
        self.weight.value = Tensor::zeros(self.weight.value.shape());
        if let Some(b) = self.bias.as_mut() {
            b.value = Tensor::zeros(b.value.shape());
        }
        self
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = tape.value(x).dims4()?.1;
        if c != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("{}: input has {c} channels, layer expects {}", self.weight.name, self.in_channels),
            ));
        }
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.geom)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}
