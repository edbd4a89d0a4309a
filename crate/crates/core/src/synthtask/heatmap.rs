use serde::{Deserialize, Serialize};

use crate::blocks::FeatureMapStack;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Ground-truth heatmap stack: one unnormalised Gaussian per joint.
/// Joints are `[x, y]` with `x` the column and `y` the row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    pub joints: Vec<[f64; 2]>,
    pub sigma: f64,
    pub h: usize,
    pub w: usize,
}

/// 2 px on a 64×48 grid, scaled with the square root of the grid area.
pub fn default_sigma(h: usize, w: usize) -> f64 {
    2.0 * ((h * w) as f64 / (64.0 * 48.0)).sqrt()
}

impl HeatmapSpec {
    pub fn k(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::param("heatmap spec needs at least one joint"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::param(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.h < 2 || self.w < 2 {
            return Err(Error::param(format!("grid {}x{} is too small", self.h, self.w)));
        }
        for (k, &[x, y]) in self.joints.iter().enumerate() {
            if !(0.0..self.w as f64).contains(&x) || !(0.0..self.h as f64).contains(&y) {
                return Err(Error::param(format!(
                    "joint {k} at ({x}, {y}) lies outside the {}x{} grid",
                    self.h, self.w
                )));
            }
        }
        Ok(())
    }
}

pub fn gaussian_heatmap_render(spec: &HeatmapSpec) -> Result<FeatureMapStack> {
    spec.validate()?;
    let (h, w) = (spec.h, spec.w);
    let denom = 2.0 * spec.sigma * spec.sigma;
    let mut data = Vec::with_capacity(spec.k() * h * w);
    for &[x, y] in &spec.joints {
        for r in 0..h {
            let dy = r as f64 - y;
            for c in 0..w {
                let dx = c as f64 - x;
                data.push((-(dx * dx + dy * dy) / denom).exp());
            }
        }
    }
    FeatureMapStack::new(Tensor::new(vec![spec.k(), h, w], data)?)
}

/// Adds white Gaussian noise and shifts every map independently by an
/// integer offset in `[-jitter, jitter]` on each axis, filling with zeros.
pub fn corrupt_heatmaps(
    x: &FeatureMapStack,
    noise_sigma: f64,
    jitter: usize,
    rng: &mut RngStream,
) -> Result<FeatureMapStack> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::param(format!("noise sigma must be ≥ 0, got {noise_sigma}")));
    }
    let (n, h, w) = (x.n(), x.h(), x.w());
    let src = x.tensor().data();
    let mut out = vec![0.0; n * h * w];
    let j = jitter as i64;
    for k in 0..n {
        let (dy, dx) = if jitter == 0 {
            (0, 0)
        } else {
            (rng.int_inclusive(-j, j), rng.int_inclusive(-j, j))
        };
        for r in 0..h {
            let sr = r as i64 - dy;
            if sr < 0 || sr >= h as i64 {
                continue;
            }
            for c in 0..w {
                let sc = c as i64 - dx;
                if sc >= 0 && sc < w as i64 {
                    out[(k * h + r) * w + c] = src[(k * h + sr as usize) * w + sc as usize];
                }
            }
        }
    }
    if noise_sigma > 0.0 {
        for v in &mut out {
            *v += noise_sigma * rng.standard_normal();
        }
    }
    FeatureMapStack::new(Tensor::new(vec![n, h, w], out)?)
}
