use serde::{Deserialize, Serialize};

use super::params::{FeatERBlockParams, FeatERBlockVars, VanillaBlockParams, VanillaBlockVars};
use super::{feater_block_on, vanilla_block_on};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Vanilla,
    Feater,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Vanilla => "vanilla",
            Architecture::Feater => "feater",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackShape {
    FeatureMaps { n: usize, h: usize, w: usize },
    Tokens { n: usize, d: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights uniform in `±1/√fan_in`, biases 0, norm gain 1 / bias 0.
    #[default]
    UniformFanIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStackConfig {
    pub depth: usize,
    pub architecture: Architecture,
    pub shape: StackShape,
    pub heads: usize,
    #[serde(default)]
    pub init: InitScheme,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StackParams {
    Vanilla(Vec<VanillaBlockParams>),
    Feater(Vec<FeatERBlockParams>),
}

impl StackParams {
    pub fn depth(&self) -> usize {
        match self {
            StackParams::Vanilla(b) => b.len(),
            StackParams::Feater(b) => b.len(),
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            StackParams::Vanilla(_) => Architecture::Vanilla,
            StackParams::Feater(_) => Architecture::Feater,
        }
    }
}

impl BlockStackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("stack depth must be at least 1"));
        }
        match (self.architecture, self.shape) {
            (Architecture::Feater, StackShape::FeatureMaps { .. })
            | (Architecture::Vanilla, StackShape::Tokens { .. }) => Ok(()),
            (arch, shape) => Err(Error::config(format!(
                "{arch} stack cannot take shape {shape:?}"
            ))),
        }
    }

    /// Seeded initialisation; block `i` draws from substream `init/block{i}`.
    pub fn init_params(&self) -> Result<StackParams> {
        self.validate()?;
        let rng = |i: usize| RngStream::new(self.seed, &format!("init/block{i}"));
        Ok(match self.shape {
            StackShape::FeatureMaps { n, h, w } => StackParams::Feater(
                (0..self.depth)
                    .map(|i| FeatERBlockParams::init(n, h, w, self.heads, &mut rng(i)))
                    .collect::<Result<_>>()?,
            ),
            StackShape::Tokens { d, .. } => StackParams::Vanilla(
                (0..self.depth)
                    .map(|i| VanillaBlockParams::init(d, self.heads, &mut rng(i)))
                    .collect::<Result<_>>()?,
            ),
        })
    }
}

pub fn feater_stack_on(tape: &mut Tape, x: Var, blocks: &[FeatERBlockVars]) -> Result<Var> {
    blocks.iter().try_fold(x, |h, b| feater_block_on(tape, h, b))
}

pub fn vanilla_stack_on(tape: &mut Tape, x: Var, blocks: &[VanillaBlockVars]) -> Result<Var> {
    blocks.iter().try_fold(x, |h, b| vanilla_block_on(tape, h, b))
}

/// Sequential composition of `cfg.depth` blocks; `x` is `[n, h, w]` for a
/// FeatER stack and `[n, d]` for a vanilla one.
pub fn stack_forward(x: &Tensor, cfg: &BlockStackConfig, params: &StackParams) -> Result<Tensor> {
    cfg.validate()?;
    if params.depth() != cfg.depth || params.architecture() != cfg.architecture {
        return Err(Error::config(format!(
            "config wants {} {} blocks, got {} {} blocks",
            cfg.depth,
            cfg.architecture,
            params.depth(),
            params.architecture()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = match params {
        StackParams::Feater(blocks) => {
            let vars: Vec<_> = blocks.iter().map(|b| b.register(&mut tape)).collect();
            feater_stack_on(&mut tape, xv, &vars)?
        }
        StackParams::Vanilla(blocks) => {
            let vars: Vec<_> = blocks.iter().map(|b| b.register(&mut tape)).collect();
            vanilla_stack_on(&mut tape, xv, &vars)?
        }
    };
    Ok(tape.value(out).clone())
}
