use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::heatmap::{corrupt_heatmaps, default_sigma, gaussian_heatmap_render, HeatmapSpec};
use super::loss::{decode_argmax_pose, mean_joint_error};
use crate::blocks::{feater_stack_on, FeatERBlockParams, FeatERBlockVars, FeatureMapStack};
use crate::error::{Error, Result};
use crate::reconstruct::{make_mask_plan, reconstruction_forward_on, MaskPlan, Mode};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_SGD_LEARNING_RATE: f64 = 0.2;
pub const DEFAULT_ADAM_LEARNING_RATE: f64 = 2e-4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// `None` picks the optimizer's default.
    pub learning_rate: Option<f64>,
    pub seed: u64,
    pub mask_ratio: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub depth: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub heads: usize,
    pub batch_size: usize,
    pub eval_samples: usize,
    pub noise_sigma: f64,
    pub jitter: usize,
    /// Heatmap width; `None` uses [`default_sigma`].
    pub sigma: Option<f64>,
    /// Reuse the step-0 batch and mask for every step.
    pub fixed_batch: bool,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            learning_rate: None,
            seed: 0,
            mask_ratio: 0.3,
            w1: 0.01,
            w2: 0.01,
            w3: 0.005,
            depth: 2,
            n: 4,
            h: 16,
            w: 16,
            heads: 1,
            batch_size: 4,
            eval_samples: 16,
            noise_sigma: 0.1,
            jitter: 1,
            sigma: None,
            fixed_batch: false,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.optimizer {
            Optimizer::Sgd => DEFAULT_SGD_LEARNING_RATE,
            Optimizer::Adam => DEFAULT_ADAM_LEARNING_RATE,
        })
    }

    pub fn effective_sigma(&self) -> f64 {
        self.sigma.unwrap_or_else(|| default_sigma(self.h, self.w))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        let lr = self.effective_learning_rate();
        if !(lr >= 0.0 && lr.is_finite()) {
            return bad(format!("learning rate must be ≥ 0, got {lr}"));
        }
        if self.depth == 0 || self.batch_size == 0 || self.eval_samples == 0 || self.heads == 0 {
            return bad("depth, batch_size, eval_samples and heads must be ≥ 1".into());
        }
        if self.h < 2 || self.w < 2 {
            return bad(format!("grid {}x{} is too small", self.h, self.w));
        }
        if self.h % self.heads != 0 || self.w % self.heads != 0 {
            return bad(format!("{} heads do not divide {}x{}", self.heads, self.h, self.w));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma));
        }
        let sigma = self.effective_sigma();
        if !(sigma > 0.0 && sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {sigma}"));
        }
        if ![self.w1, self.w2, self.w3].iter().all(|v| v.is_finite()) {
            return bad("loss weights must be finite".into());
        }
        make_mask_plan(self.n, self.mask_ratio, &mut RngStream::new(0, "validate"))
            .map_err(|e| Error::config(e.to_string()))?;
        Ok(())
    }
}

/// A refinement stack (corrupted → clean heatmaps) and the reconstruction
/// stack that restores its masked output.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams {
    pub refine: Vec<FeatERBlockParams>,
    pub recon: Vec<FeatERBlockParams>,
}

pub struct ToyVars {
    pub refine: Vec<FeatERBlockVars>,
    pub recon: Vec<FeatERBlockVars>,
}

impl ToyParams {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let root = RngStream::new(cfg.seed, "init");
        let stack = |part: &str| {
            (0..cfg.depth)
                .map(|i| {
                    let mut rng = root.substream(&format!("{part}/block{i}"));
                    FeatERBlockParams::init(cfg.n, cfg.h, cfg.w, cfg.heads, &mut rng)
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(ToyParams {
            refine: stack("refine")?,
            recon: stack("recon")?,
        })
    }

    /// Every tensor as `(qualified name, tensor)`, refine stack first.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (part, blocks) in [("refine", &self.refine), ("recon", &self.recon)] {
            for (i, b) in blocks.iter().enumerate() {
                for (name, _, t) in b.named() {
                    out.push((format!("{part}.block{i}.{name}"), t));
                }
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.refine
            .iter_mut()
            .chain(self.recon.iter_mut())
            .flat_map(|b| b.named_mut().into_iter().map(|(_, t)| t))
            .collect()
    }

    pub fn register(&self, tape: &mut Tape) -> ToyVars {
        ToyVars {
            refine: self.refine.iter().map(|b| b.register(tape)).collect(),
            recon: self.recon.iter().map(|b| b.register(tape)).collect(),
        }
    }
}

impl ToyVars {
    /// Rebuilds handles from vars listed in [`ToyParams::named`] order.
    pub fn from_vars(heads: usize, depth: usize, vars: &[Var]) -> Result<Self> {
        let per = FeatERBlockParams::NAMES.len();
        if vars.len() != 2 * depth * per {
            return Err(Error::dim(format!(
                "expected {} vars, got {}",
                2 * depth * per,
                vars.len()
            )));
        }
        let blocks = vars
            .chunks_exact(per)
            .map(|c| FeatERBlockVars::from_vars(heads, c))
            .collect::<Result<Vec<_>>>()?;
        let (refine, recon) = blocks.split_at(depth);
        Ok(ToyVars {
            refine: refine.to_vec(),
            recon: recon.to_vec(),
        })
    }

    fn all(&self) -> Vec<Var> {
        self.refine
            .iter()
            .chain(&self.recon)
            .flat_map(|b| b.vars().into_iter().map(|(_, v)| v))
            .collect()
    }
}

/// Corrupted inputs, clean targets, their joints and one shared mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBatch {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    pub joints: Vec<Vec<[f64; 2]>>,
    pub plan: MaskPlan,
}

pub fn sample_batch(cfg: &TrainConfig, size: usize, rng: &mut RngStream) -> Result<ToyBatch> {
    let mut batch = ToyBatch {
        inputs: Vec::with_capacity(size),
        targets: Vec::with_capacity(size),
        joints: Vec::with_capacity(size),
        plan: make_mask_plan(cfg.n, cfg.mask_ratio, rng)?,
    };
    for _ in 0..size {
        let joints: Vec<[f64; 2]> = (0..cfg.n)
            .map(|_| {
                let x = rng.int_inclusive(0, cfg.w as i64 - 1) as f64;
                let y = rng.int_inclusive(0, cfg.h as i64 - 1) as f64;
                [x, y]
            })
            .collect();
        let clean = gaussian_heatmap_render(&HeatmapSpec {
            joints: joints.clone(),
            sigma: cfg.effective_sigma(),
            h: cfg.h,
            w: cfg.w,
        })?;
        let noisy = corrupt_heatmaps(&clean, cfg.noise_sigma, cfg.jitter, rng)?;
        batch.inputs.push(noisy.into_tensor());
        batch.targets.push(clean.into_tensor());
        batch.joints.push(joints);
    }
    Ok(batch)
}

pub struct ToyObjective {
    pub total: Var,
    pub heatmap: Var,
    pub recon: Var,
    /// Refined heatmaps, one per batch entry.
    pub outputs: Vec<Var>,
}

/// Batch mean of `heatmap MSE + w3 · reconstruction MSE`.
pub fn toy_objective_on(
    tape: &mut Tape,
    refine: &[FeatERBlockVars],
    recon: &[FeatERBlockVars],
    batch: &ToyBatch,
    w3: f64,
) -> Result<ToyObjective> {
    let mut heatmap: Option<Var> = None;
    let mut rec: Option<Var> = None;
    let mut outputs = Vec::with_capacity(batch.inputs.len());
    for (x, y) in batch.inputs.iter().zip(&batch.targets) {
        let xv = tape.leaf(x.clone());
        let yv = tape.leaf(y.clone());
        let refined = feater_stack_on(tape, xv, refine)?;
        let hm = tape.mse(refined, yv)?;
        let (_, rl) = reconstruction_forward_on(tape, refined, recon, Some(&batch.plan), Mode::Train)?;
        let rl = rl.expect("train mode yields a loss");
        heatmap = Some(match heatmap {
            Some(acc) => tape.add(acc, hm)?,
            None => hm,
        });
        rec = Some(match rec {
            Some(acc) => tape.add(acc, rl)?,
            None => rl,
        });
        outputs.push(refined);
    }
    let count = batch.inputs.len();
    let (Some(hm), Some(rl)) = (heatmap, rec) else {
        return Err(Error::param("empty batch"));
    };
    let heatmap = tape.scale(hm, 1.0 / count as f64);
    let recon = tape.scale(rl, 1.0 / count as f64);
    let weighted = tape.scale(recon, w3);
    let total = tape.add(heatmap, weighted)?;
    Ok(ToyObjective {
        total,
        heatmap,
        recon,
        outputs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total_loss: f64,
    pub heatmap_loss: f64,
    pub recon_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub total_loss: f64,
    pub heatmap_loss: f64,
    pub recon_loss: f64,
    pub decode_err_px: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub config: TrainConfig,
    /// Losses for steps `0..=steps`; entry `i` is measured after `i` updates.
    pub steps: Vec<StepRecord>,
    pub initial: EvalMetrics,
    pub final_metrics: EvalMetrics,
    pub params: ToyParams,
}

impl TrainRecord {
    /// One JSON object per step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Fixed held-out batch and mask used for the initial and final metrics.
pub fn eval_batch(cfg: &TrainConfig) -> Result<ToyBatch> {
    sample_batch(cfg, cfg.eval_samples, &mut RngStream::new(cfg.seed, "eval"))
}

pub fn evaluate(params: &ToyParams, batch: &ToyBatch, w3: f64) -> Result<EvalMetrics> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let obj = toy_objective_on(&mut tape, &vars.refine, &vars.recon, batch, w3)?;
    let mut err = 0.0;
    for (out, joints) in obj.outputs.iter().zip(&batch.joints) {
        let pose = decode_argmax_pose(&FeatureMapStack::new(tape.value(*out).clone())?);
        err += mean_joint_error(&pose.joints, joints)?;
    }
    Ok(EvalMetrics {
        total_loss: tape.value(obj.total).item()?,
        heatmap_loss: tape.value(obj.heatmap).item()?,
        recon_loss: tape.value(obj.recon).item()?,
        decode_err_px: err / batch.joints.len() as f64,
    })
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Trains both stacks jointly on freshly sampled batches (or one fixed batch).
pub fn train_toy(cfg: &TrainConfig) -> Result<TrainRecord> {
    cfg.validate()?;
    let lr = cfg.effective_learning_rate();
    let mut params = ToyParams::init(cfg)?;
    let eval = eval_batch(cfg)?;
    let initial = evaluate(&params, &eval, cfg.w3)?;

    let mut adam = match cfg.optimizer {
        Optimizer::Adam => {
            let zeros: Vec<Tensor> = params.named().iter().map(|(_, t)| t.map(|_| 0.0)).collect();
            Some(Adam { m: zeros.clone(), v: zeros, t: 0 })
        }
        Optimizer::Sgd => None,
    };
    let fixed = if cfg.fixed_batch {
        Some(sample_batch(cfg, cfg.batch_size, &mut RngStream::new(cfg.seed, "train/step0"))?)
    } else {
        None
    };

    let mut steps = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let fresh;
        let batch = match &fixed {
            Some(b) => b,
            None => {
                let mut rng = RngStream::new(cfg.seed, &format!("train/step{step}"));
                fresh = sample_batch(cfg, cfg.batch_size, &mut rng)?;
                &fresh
            }
        };
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let obj = toy_objective_on(&mut tape, &vars.refine, &vars.recon, batch, cfg.w3)?;
        let record = StepRecord {
            step,
            total_loss: tape.value(obj.total).item()?,
            heatmap_loss: tape.value(obj.heatmap).item()?,
            recon_loss: tape.value(obj.recon).item()?,
        };
        if !record.total_loss.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at step {step}")));
        }
        steps.push(record);
        if step == cfg.steps {
            break;
        }
        let grads = tape.backward(obj.total)?;
        let mut tensors = params.tensors_mut();
        let grads: Vec<Tensor> = vars
            .all()
            .into_iter()
            .zip(tensors.iter())
            .map(|(v, t)| grads.get_or_zeros(v, t))
            .collect();
        match &mut adam {
            Some(opt) => opt.step(&mut tensors, &grads, lr),
            None => {
                for (p, g) in tensors.iter_mut().zip(&grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * d;
                    }
                }
            }
        }
    }

    let final_metrics = evaluate(&params, &eval, cfg.w3)?;
    Ok(TrainRecord {
        config: cfg.clone(),
        steps,
        initial,
        final_metrics,
        params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ratio: f64,
    pub decode_err_px: f64,
    pub recon_loss: f64,
}

pub const ABLATION_CSV_HEADER: &str = "ratio,decode_err_px,recon_loss";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.ratio, r.decode_err_px, r.recon_loss));
    }
    out
}

pub fn ablate_mask_ratio(ratios: &[f64], base: &TrainConfig) -> Result<Vec<AblationRow>> {
    ablate_mask_ratio_jobs(ratios, base, 1)
}

/// One [`train_toy`] run per ratio on up to `jobs` threads; rows come back in
/// ascending ratio order.
pub fn ablate_mask_ratio_jobs(ratios: &[f64], base: &TrainConfig, jobs: usize) -> Result<Vec<AblationRow>> {
    if ratios.is_empty() {
        return Err(Error::param("ablation needs at least one ratio"));
    }
    if let Some(r) = ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::param(format!("masking ratio {r} is outside [0, 1)")));
    }
    let mut sorted = ratios.to_vec();
    sorted.sort_by(f64::total_cmp);

    let run = |ratio: f64| -> Result<AblationRow> {
        let cfg = TrainConfig { mask_ratio: ratio, ..base.clone() };
        let rec = train_toy(&cfg)?;
        Ok(AblationRow {
            ratio,
            decode_err_px: rec.final_metrics.decode_err_px,
            recon_loss: rec.final_metrics.recon_loss,
        })
    };

    let results: Mutex<Vec<Option<Result<AblationRow>>>> = Mutex::new((0..sorted.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, sorted.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&ratio) = sorted.get(i) else { break };
                let row = run(ratio);
                results.lock().unwrap()[i] = Some(row);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every ratio is processed"))
        .collect()
}
