use crate::backbone::{Backbone, BackboneConfig, Stage, Stem, Unit};
use crate::error::{Error, Result};
use crate::numerics::{seeded, ConvLayer, Parameter, Tape, Var};

/// `relu(conv2(relu(conv1(x))) + skip(x))`; `skip` is a strided 1×1
/// projection when the block changes channels or resolution.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub proj: Option<ConvLayer>,
}

impl ResidualBlock {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(tape, x)?,
            None => x,
        };
        let y = tape.add(h, skip)?;
        Ok(tape.relu(y))
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.conv1.params();
        out.extend(self.conv2.params());
        if let Some(p) = &self.proj {
            out.extend(p.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.conv1.params_mut();
        out.extend(self.conv2.params_mut());
        if let Some(p) = &mut self.proj {
            out.extend(p.params_mut());
        }
        out
    }
}

pub const RESIDUAL_INIT_SCALE: f64 = 0.25;

/// Residual CNN: stride-2 stem, then stages with strides `(1, 2, 2, ...)`.
pub fn build_toy_cnn(channels: &[usize], depths: &[usize], seed: u64) -> Result<Backbone> {
    if channels.is_empty() || channels.len() != depths.len() {
        return Err(Error::config("backbone.channels", "channels and depths must be non-empty and equally long"));
    }
    if let Some(i) = channels.iter().position(|&c| c == 0) {
        return Err(Error::config(format!("backbone.channels[{i}]"), "must be positive"));
    }
    if let Some(i) = depths.iter().position(|&d| d == 0) {
        return Err(Error::config(format!("backbone.depths[{i}]"), "must be positive"));
    }
    let mut rng = seeded(seed);
    let c0 = channels[0];
    let stem = Stem::Conv {
        conv: ConvLayer::strided("backbone.stem", 3, c0, 3, 2, &mut rng)?,
        scale: vec![1.0; c0],
        shift: vec![0.0; c0],
    };
    let mut stages = Vec::with_capacity(channels.len());
    let mut cin = c0;
    for (s, (&cout, &depth)) in channels.iter().zip(depths).enumerate() {
        let stride = if s == 0 { 1 } else { 2 };
        let mut units = Vec::with_capacity(depth);
        for b in 0..depth {
            let (bin, bstride) = if b == 0 { (cin, stride) } else { (cout, 1) };
            let name = format!("backbone.s{}.b{b}", s + 1);
            let conv1 = ConvLayer::strided(&format!("{name}.conv1"), bin, cout, 3, bstride, &mut rng)?;
            let mut conv2 = ConvLayer::strided(&format!("{name}.conv2"), cout, cout, 3, 1, &mut rng)?;
            // residual branches start small so each block is close to the identity
            conv2.weight.value = conv2.weight.value.map(|v| v * RESIDUAL_INIT_SCALE);
            let proj = if bin != cout || bstride != 1 {
                Some(ConvLayer::strided(&format!("{name}.proj"), bin, cout, 1, bstride, &mut rng)?)
            } else {
                None
            };
            units.push(Unit::Residual(ResidualBlock { conv1, conv2, proj }));
        }
        stages.push(Stage { units, in_channels: cin, out_channels: cout, stride });
        cin = cout;
    }
    Ok(Backbone {
        config: BackboneConfig::Cnn { channels: channels.to_vec(), depths: depths.to_vec(), seed },
        stem,
        stages,
        frozen: false,
        provenance: format!("random-init seed={seed}"),
    })
}
