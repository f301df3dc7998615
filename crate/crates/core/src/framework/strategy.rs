use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, UnitHook};
use crate::error::{Error, Result};
use crate::numerics::{ConvGeom, ConvLayer, Parameter, Rng64, Tape, Var};

/// Which tensors train downstream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Backbone and head.
    Full,
    /// Like `Full`, starting from a re-randomized backbone.
    Scratch,
    Head,
    /// Convolution biases of the backbone, plus the head.
    Bias,
    /// Per-block side network from block input to block output.
    Side,
    /// Per-block bottleneck on the block output.
    Adapter,
    PromptMatched,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Full,
        Strategy::Scratch,
        Strategy::Head,
        Strategy::Bias,
        Strategy::Side,
        Strategy::Adapter,
        Strategy::PromptMatched,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::Scratch => "scratch",
            Strategy::Head => "head",
            Strategy::Bias => "bias",
            Strategy::Side => "side",
            Strategy::Adapter => "adapter",
            Strategy::PromptMatched => "prompt_matched",
        }
    }

    /// Strategies whose backbone tensors must stay bitwise fixed.
    pub fn freezes_backbone(self) -> bool {
        matches!(self, Strategy::Head | Strategy::Side | Strategy::Adapter | Strategy::PromptMatched)
    }

    pub fn uses_block_modules(self) -> bool {
        matches!(self, Strategy::Side | Strategy::Adapter)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockModuleConfig {
    pub channels: usize,
    pub groups: usize,
}

impl Default for BlockModuleConfig {
    fn default() -> Self {
        BlockModuleConfig { channels: 64, groups: 4 }
    }
}

/// `up1x1(relu(down3x3(x)))`; `up` starts at zero so the module is inert at init.
#[derive(Clone, Debug)]
pub struct BlockModule {
    pub down: ConvLayer,
    pub up: ConvLayer,
}

impl BlockModule {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        cfg: &BlockModuleConfig,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let geom = ConvGeom { kernel: 3, stride, padding: 1, dilation: 1, groups: cfg.groups };
        Ok(BlockModule {
            down: ConvLayer::with_geom(&format!("{name}.down"), in_channels, cfg.channels, geom, rng)?,
            up: ConvLayer::same(&format!("{name}.up"), cfg.channels, out_channels, 1, 1, 1, rng)?.zeroed(),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.down.forward(tape, x)?;
        let h = tape.relu(h);
        self.up.forward(tape, h)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.down.params();
        out.extend(self.up.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.down.params_mut();
        out.extend(self.up.params_mut());
        out
    }
}

/// One module per residual/mixer unit, indexed `[stage - 1][unit]`.
pub fn build_block_modules(
    strategy: Strategy,
    backbone: &Backbone,
    cfg: &BlockModuleConfig,
    rng: &mut Rng64,
) -> Result<Vec<Vec<BlockModule>>> {
    if !strategy.uses_block_modules() {
        return Ok(Vec::new());
    }
    let tag = strategy.as_str();
    backbone
        .stages
        .iter()
        .enumerate()
        .map(|(s, stage)| {
            stage
                .units
                .iter()
                .enumerate()
                .map(|(u, unit)| {
                    let name = format!("{tag}.s{}.b{u}", s + 1);
                    // the adapter sees the block output, already strided
                    let (cin, stride) = match strategy {
                        Strategy::Side => (unit.in_channels(), unit.stride()),
                        _ => (unit.out_channels(), 1),
                    };
                    BlockModule::new(&name, cin, unit.out_channels(), stride, cfg, rng)
                })
                .collect()
        })
        .collect()
}

pub(crate) struct ModuleHook<'a> {
    pub strategy: Strategy,
    pub modules: &'a [Vec<BlockModule>],
}

impl UnitHook for ModuleHook<'_> {
    fn after_unit(&self, tape: &mut Tape, stage: usize, unit: usize, input: Var, output: Var) -> Result<Var> {
        let Some(m) = self.modules.get(stage - 1).and_then(|s| s.get(unit)) else {
            return Ok(output);
        };
        let branch = match self.strategy {
            Strategy::Side => m.forward(tape, input)?,
            _ => m.forward(tape, output)?,
        };
        tape.add(output, branch)
    }
}
