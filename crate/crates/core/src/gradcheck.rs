//! Central finite-difference verification of tape gradients.

use serde::{Deserialize, Serialize};

use crate::blocks::{
    feater_block_on, vanilla_block_on, FeatERBlockParams, FeatERBlockVars, ParamKind, VanillaBlockParams,
    VanillaBlockVars,
};
use crate::error::{Error, Result};
use crate::reconstruct::{make_mask_plan, reconstruction_forward_on, Mode};
use crate::rng::RngStream;
use crate::synthtask::{sample_batch, toy_objective_on, ToyParams, ToyVars, TrainConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const REL_ERROR_FLOOR: f64 = 1e-12;
/// Groups larger than this are checked on a seeded subsample.
pub const FULL_CHECK_LIMIT: usize = 4096;
pub const SUBSAMPLE_SIZE: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub entries_checked: usize,
    /// Flat index of the entry with the largest error.
    pub worst_entry: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub eps: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// `|a − n| / max(|a|, |n|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences `(f(p + eps) − f(p − eps)) / 2eps`, entry by entry.
///
/// `f` receives a fresh tape and one leaf per parameter group, in order, and
/// must return a scalar var. `seed` keys the subsample drawn for groups with
/// more than [`FULL_CHECK_LIMIT`] entries.
pub fn grad_check<F>(
    f: F,
    params: &[(String, Tensor)],
    eps: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::param(format!("finite-difference eps must be positive, got {eps}")));
    }
    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().cloned().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut groups = Vec::with_capacity(params.len());
    for (g, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[g], tensor);
        let entries: Vec<usize> = if tensor.len() > FULL_CHECK_LIMIT {
            RngStream::new(seed, &format!("gradcheck/{name}"))
                .sample_indices(tensor.len(), SUBSAMPLE_SIZE)
        } else {
            (0..tensor.len()).collect()
        };
        let mut worst = (0.0f64, entries.first().copied().unwrap_or(0));
        for &i in &entries {
            let original = values[g].data()[i];
            values[g].data_mut()[i] = original + eps;
            let plus = evaluate(&values)?;
            values[g].data_mut()[i] = original - eps;
            let minus = evaluate(&values)?;
            values[g].data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            if a.is_nan() || numeric.is_nan() {
                return Err(Error::Numeric(format!(
                    "NaN gradient in group {name} entry {i} (analytic {a}, numeric {numeric})"
                )));
            }
            let err = relative_error(a, numeric);
            if err > worst.0 {
                worst = (err, i);
            }
        }
        groups.push(GroupCheck {
            name: name.clone(),
            max_rel_error: worst.0,
            entries_checked: entries.len(),
            worst_entry: worst.1,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        eps,
        tolerance,
        max_rel_error,
        pass: max_rel_error < tolerance,
    })
}

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Copies named tensors as check groups; norm and bias entries get a seeded
/// offset in `±0.5` so that no group sits at a special point.
fn jittered<'a>(
    prefix: &str,
    named: impl IntoIterator<Item = (&'static str, ParamKind, &'a Tensor)>,
    rng: &mut RngStream,
) -> Result<Vec<(String, Tensor)>> {
    named
        .into_iter()
        .map(|(name, kind, t)| {
            let t = match kind {
                ParamKind::Weight => t.clone(),
                _ => t.add(&Tensor::uniform(t.shape(), -0.5, 0.5, rng)?)?,
            };
            Ok((format!("{prefix}{name}"), t))
        })
        .collect()
}

/// `Σ out ⊙ r` for a fixed random `r`.
fn projected(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.leaf(r.clone());
    let prod = tape.mul(out, rv)?;
    Ok(tape.sum(prod))
}

/// Input and every parameter group of one vanilla block on `[n, d]`.
pub fn check_vanilla_block(n: usize, d: usize, heads: usize, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = RngStream::new(seed, "gradcheck/vanilla");
    let p = VanillaBlockParams::init(d, heads, &mut rng)?;
    let mut params = vec![("input".to_string(), Tensor::uniform(&[n, d], -1.0, 1.0, &mut rng)?)];
    params.extend(jittered("", p.named(), &mut rng)?);
    let r = Tensor::uniform(&[n, d], -1.0, 1.0, &mut rng)?;
    grad_check(
        |tape, v| {
            let block = VanillaBlockVars::from_vars(heads, &v[1..])?;
            let out = vanilla_block_on(tape, v[0], &block)?;
            projected(tape, out, &r)
        },
        &params,
        eps,
        DEFAULT_TOLERANCE,
        seed,
    )
}

/// Input and every parameter group of one FeatER block on `[n, h, w]`.
pub fn check_feater_block(
    n: usize,
    h: usize,
    w: usize,
    heads: usize,
    seed: u64,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut rng = RngStream::new(seed, "gradcheck/feater");
    let p = FeatERBlockParams::init(n, h, w, heads, &mut rng)?;
    let mut params = vec![("input".to_string(), Tensor::uniform(&[n, h, w], -1.0, 1.0, &mut rng)?)];
    params.extend(jittered("", p.named(), &mut rng)?);
    let r = Tensor::uniform(&[n, h, w], -1.0, 1.0, &mut rng)?;
    grad_check(
        |tape, v| {
            let block = FeatERBlockVars::from_vars(heads, &v[1..])?;
            let out = feater_block_on(tape, v[0], &block)?;
            projected(tape, out, &r)
        },
        &params,
        eps,
        DEFAULT_TOLERANCE,
        seed,
    )
}

/// Reconstruction loss of a masked FeatER stack, w.r.t. the input and all
/// block parameters.
pub fn check_reconstruction(
    n: usize,
    h: usize,
    w: usize,
    depth: usize,
    ratio: f64,
    seed: u64,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut rng = RngStream::new(seed, "gradcheck/reconstruction");
    let plan = make_mask_plan(n, ratio, &mut rng)?;
    let mut params = vec![("input".to_string(), Tensor::uniform(&[n, h, w], -1.0, 1.0, &mut rng)?)];
    for i in 0..depth {
        let p = FeatERBlockParams::init(n, h, w, 1, &mut rng)?;
        params.extend(jittered(&format!("block{i}."), p.named(), &mut rng)?);
    }
    let per = FeatERBlockParams::NAMES.len();
    grad_check(
        |tape, v| {
            let blocks = v[1..]
                .chunks_exact(per)
                .map(|c| FeatERBlockVars::from_vars(1, c))
                .collect::<Result<Vec<_>>>()?;
            let (_, loss) = reconstruction_forward_on(tape, v[0], &blocks, Some(&plan), Mode::Train)?;
            Ok(loss.expect("train mode yields a loss"))
        },
        &params,
        eps,
        DEFAULT_TOLERANCE,
        seed,
    )
}

/// Full toy objective (heatmap MSE + w3 · reconstruction MSE) on the
/// step-0 training batch of `cfg`, w.r.t. every parameter of both stacks.
pub fn check_toy_objective(cfg: &TrainConfig, eps: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let toy = ToyParams::init(cfg)?;
    let mut rng = RngStream::new(cfg.seed, "gradcheck/toy");
    let batch = sample_batch(cfg, cfg.batch_size, &mut rng)?;
    let mut params = Vec::new();
    for (prefix, blocks) in [("refine", &toy.refine), ("recon", &toy.recon)] {
        for (i, b) in blocks.iter().enumerate() {
            params.extend(jittered(&format!("{prefix}.block{i}."), b.named(), &mut rng)?);
        }
    }
    grad_check(
        |tape, v| {
            let vars = ToyVars::from_vars(cfg.heads, cfg.depth, v)?;
            Ok(toy_objective_on(tape, &vars.refine, &vars.recon, &batch, cfg.w3)?.total)
        },
        &params,
        eps,
        DEFAULT_TOLERANCE,
        cfg.seed,
    )
}
