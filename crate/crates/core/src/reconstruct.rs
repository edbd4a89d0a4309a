//! Whole-feature-map masking and reconstruction.
//!
//! During training `m = round(ratio · n)` channels are blanked and a FeatER
//! stack is asked to restore the full stack; the loss is the MSE against the
//! unmasked input over every channel. At evaluation time nothing is masked.

use serde::{Deserialize, Serialize};

use crate::blocks::{feater_stack_on, FeatERBlockParams, FeatERBlockVars, FeatureMapStack};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Masked channels become all zeros.
    #[default]
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub n: usize,
    pub ratio: f64,
    pub m: usize,
    /// Distinct channel indices, ascending.
    pub indices: Vec<usize>,
    #[serde(default)]
    pub fill: FillPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

fn masked_count(n: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::param(format!("masking ratio {ratio} is outside [0, 1)")));
    }
    if n < 2 {
        return Err(Error::param(format!("masking needs at least 2 channels, got {n}")));
    }
    let m = (ratio * n as f64).round() as usize;
    if m >= n {
        return Err(Error::param(format!(
            "ratio {ratio} would mask all {n} channels"
        )));
    }
    Ok(m)
}

/// Draws `round(ratio · n)` channels uniformly without replacement.
pub fn make_mask_plan(n: usize, ratio: f64, rng: &mut RngStream) -> Result<MaskPlan> {
    let m = masked_count(n, ratio)?;
    Ok(MaskPlan {
        n,
        ratio,
        m,
        indices: rng.sample_indices(n, m),
        fill: FillPolicy::Zeros,
    })
}

impl MaskPlan {
    pub fn validate(&self) -> Result<()> {
        let m = masked_count(self.n, self.ratio)?;
        let mut sorted = self.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if m != self.m || self.indices.len() != m || sorted.len() != m {
            return Err(Error::param(format!(
                "mask plan lists {} indices ({} distinct) for m = {}, expected {m}",
                self.indices.len(),
                sorted.len(),
                self.m
            )));
        }
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= self.n) {
            return Err(Error::dim(format!("masked channel {bad} out of range for n = {}", self.n)));
        }
        Ok(())
    }
}

fn check_plan_fits(plan: &MaskPlan, channels: usize) -> Result<()> {
    if plan.n != channels {
        return Err(Error::dim(format!(
            "mask plan for {} channels applied to {channels}",
            plan.n
        )));
    }
    if let Some(&bad) = plan.indices.iter().find(|&&i| i >= channels) {
        return Err(Error::dim(format!("masked channel {bad} out of range for {channels} channels")));
    }
    Ok(())
}

pub fn apply_mask(x: &FeatureMapStack, plan: &MaskPlan) -> Result<FeatureMapStack> {
    check_plan_fits(plan, x.n())?;
    let per = x.h() * x.w();
    let mut out = x.tensor().clone();
    for &c in &plan.indices {
        match plan.fill {
            FillPolicy::Zeros => out.data_mut()[c * per..(c + 1) * per].fill(0.0),
        }
    }
    FeatureMapStack::new(out)
}

/// Mean over all entries of the squared difference.
pub fn reconstruction_loss(recon: &FeatureMapStack, target: &FeatureMapStack) -> Result<f64> {
    mean_squared_error(recon.tensor(), target.tensor())
}

pub(crate) fn mean_squared_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(total / a.len() as f64)
}

/// Tape form of [`reconstruction_forward`]; returns `(output, loss)`.
pub fn reconstruction_forward_on(
    tape: &mut Tape,
    x: Var,
    stack: &[FeatERBlockVars],
    plan: Option<&MaskPlan>,
    mode: Mode,
) -> Result<(Var, Option<Var>)> {
    match mode {
        Mode::Eval => Ok((feater_stack_on(tape, x, stack)?, None)),
        Mode::Train => {
            let plan = plan.ok_or_else(|| Error::config("train mode needs a mask plan"))?;
            check_plan_fits(plan, tape.value(x).shape()[0])?;
            let masked = tape.mask_channels(x, &plan.indices)?;
            let out = feater_stack_on(tape, masked, stack)?;
            let loss = tape.mse(out, x)?;
            Ok((out, Some(loss)))
        }
    }
}

/// Train: `stack(mask(x))` with its MSE against `x`. Eval: `stack(x)`, no loss.
pub fn reconstruction_forward(
    x: &FeatureMapStack,
    stack: &[FeatERBlockParams],
    plan: Option<&MaskPlan>,
    mode: Mode,
) -> Result<(FeatureMapStack, Option<f64>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.tensor().clone());
    let vars: Vec<_> = stack.iter().map(|b| b.register(&mut tape)).collect();
    let (out, loss) = reconstruction_forward_on(&mut tape, xv, &vars, plan, mode)?;
    let loss = loss.map(|l| tape.value(l).item()).transpose()?;
    Ok((FeatureMapStack::new(tape.value(out).clone())?, loss))
}
