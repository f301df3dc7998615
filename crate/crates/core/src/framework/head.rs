use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{ConvLayer, Parameter, Rng64, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { channels: 64 }
    }
}

/// `conv3x3 -> relu -> conv3x3` to class logits, then bilinear upsampling to
/// the image resolution.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

impl SegHead {
    pub fn new(name: &str, in_channels: usize, hidden: usize, classes: usize, rng: &mut Rng64) -> Result<Self> {
        Ok(SegHead {
            conv1: ConvLayer::same(&format!("{name}.conv1"), in_channels, hidden, 3, 1, 1, rng)?,
            conv2: ConvLayer::same(&format!("{name}.conv2"), hidden, classes, 3, 1, 1, rng)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = tape.relu(h);
        let logits = self.conv2.forward(tape, h)?;
        tape.bilinear_resize(logits, out_h, out_w)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.conv1.params();
        out.extend(self.conv2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.conv1.params_mut();
        out.extend(self.conv2.params_mut());
        out
    }
}
