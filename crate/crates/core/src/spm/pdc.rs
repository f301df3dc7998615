use crate::error::{Error, Result};
use crate::numerics::{ConvLayer, Parameter, Rng64, Tape, Var};

/// Pyramid dilation convolution: the input's channels are cut into four
/// equal chunks, chunk `j` goes through a 3×3 grouped convolution with
/// dilation `dilations[j]`, and a 1×1 layer fuses the concatenation back to
/// `C` channels. Output shape equals input shape.
#[derive(Clone, Debug)]
pub struct PdcParams {
    pub channels: usize,
    pub branches: Vec<ConvLayer>,
    pub fuse: ConvLayer,
    pub relu: bool,
}

/// 16 when a chunk has at least 16 channels and 16 divides it, otherwise
/// the largest divisor of the chunk width not above 16.
pub fn default_pdc_groups(channels: usize) -> usize {
    let chunk = (channels / 4).max(1);
    (1..=chunk.min(16)).rev().find(|g| chunk % g == 0).unwrap_or(1)
}

impl PdcParams {
    pub fn new(
        name: &str,
        channels: usize,
        groups: usize,
        dilations: [usize; 4],
        relu: bool,
        rng: &mut Rng64,
    ) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(Error::config("spm.C", format!("{channels} channels do not split into 4 chunks")));
        }
        let chunk = channels / 4;
        if groups == 0 || chunk % groups != 0 {
            return Err(Error::config("spm.pdc_groups", format!("{groups} groups do not divide chunk width {chunk}")));
        }
        let branches = dilations
            .iter()
            .enumerate()
            .map(|(j, &d)| ConvLayer::same(&format!("{name}.d{j}"), chunk, chunk, 3, d, groups, rng))
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvLayer::same(&format!("{name}.fuse"), channels, channels, 1, 1, 1, rng)?;
        Ok(PdcParams { channels, branches, fuse, relu })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = tape.value(x).dims4()?.1;
        if c != self.channels {
            return Err(Error::shape("pdc", format!("input has {c} channels, block expects {}", self.channels)));
        }
        let chunk = c / 4;
        let mut outs = Vec::with_capacity(4);
        for (j, conv) in self.branches.iter().enumerate() {
            let part = tape.slice_channels(x, j * chunk, chunk)?;
            let y = conv.forward(tape, part)?;
            outs.push(if self.relu { tape.relu(y) } else { y });
        }
        let cat = tape.concat_channels(&outs)?;
        self.fuse.forward(tape, cat)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = self.branches.iter().flat_map(|b| b.params()).collect();
        out.extend(self.fuse.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.branches.iter_mut().flat_map(|b| b.params_mut()).collect();
        out.extend(self.fuse.params_mut());
        out
    }
}
