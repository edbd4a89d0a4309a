//! Closed-form multiply-accumulate and parameter counts, and the bridge from
//! an instrumented tape to the same report format.
//!
//! Only the weight applications are counted: softmax, normalisation,
//! activations, additions and biases contribute no MACs. With that
//! accounting one block costs
//!
//! ```text
//! vanilla: 8·n·d² + 2·n²·d
//! FeatER:  3·n·h·w·(w + h) + 9·n²·h·w
//! ```

use serde::{Deserialize, Serialize};

use crate::blocks::{labels, FeatERBlockParams, ParamKind, VanillaBlockParams};
use crate::error::{Error, Result};
use crate::tape::Tape;

pub const BIAS_AND_NORM_ROW: &str = "biases and norms";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub label: String,
    pub macs: u64,
    pub params: u64,
}

/// Per-layer counts; totals are always derived from the rows.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "ReportJson", try_from = "ReportJson")]
pub struct CostReport {
    rows: Vec<CostRow>,
}

#[derive(Serialize, Deserialize)]
struct ReportJson {
    rows: Vec<(String, u64, u64)>,
    total_macs: u64,
    total_params: u64,
}

impl From<CostReport> for ReportJson {
    fn from(r: CostReport) -> Self {
        let (total_macs, total_params) = (r.total_macs(), r.total_params());
        Self {
            rows: r.rows.into_iter().map(|c| (c.label, c.macs, c.params)).collect(),
            total_macs,
            total_params,
        }
    }
}

impl TryFrom<ReportJson> for CostReport {
    type Error = String;

    fn try_from(j: ReportJson) -> std::result::Result<Self, String> {
        let report = CostReport {
            rows: j
                .rows
                .into_iter()
                .map(|(label, macs, params)| CostRow { label, macs, params })
                .collect(),
        };
        if report.total_macs() != j.total_macs || report.total_params() != j.total_params {
            return Err(format!(
                "totals ({}, {}) do not equal the row sums ({}, {})",
                j.total_macs,
                j.total_params,
                report.total_macs(),
                report.total_params()
            ));
        }
        Ok(report)
    }
}

impl CostReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, label: impl Into<String>, macs: u64, params: u64) {
        self.rows.push(CostRow {
            label: label.into(),
            macs,
            params,
        });
    }

    pub fn rows(&self) -> &[CostRow] {
        &self.rows
    }

    pub fn row(&self, label: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    /// Parameters outside the bias/norm row.
    pub fn weight_params(&self) -> u64 {
        self.total_params() - self.row(BIAS_AND_NORM_ROW).map_or(0, |r| r.params)
    }

    /// Every row multiplied by `factor` (e.g. a stack of identical blocks).
    pub fn scaled(&self, factor: u64) -> Result<Self> {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                Some(CostRow {
                    label: r.label.clone(),
                    macs: r.macs.checked_mul(factor)?,
                    params: r.params.checked_mul(factor)?,
                })
            })
            .collect::<Option<_>>()
            .ok_or_else(|| Error::param("scaled cost report overflows u64"))?;
        Ok(Self { rows })
    }

    pub fn to_text_table(&self) -> String {
        let total = ("total".to_string(), self.total_macs(), self.total_params());
        let lines: Vec<(String, u64, u64)> = self
            .rows
            .iter()
            .map(|r| (r.label.clone(), r.macs, r.params))
            .chain(std::iter::once(total))
            .collect();
        let lw = lines.iter().map(|l| l.0.len()).max().unwrap_or(0).max(5);
        let mw = lines.iter().map(|l| l.1.to_string().len()).max().unwrap_or(0).max(4);
        let pw = lines.iter().map(|l| l.2.to_string().len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:<lw$}  {:>mw$}  {:>pw$}\n", "layer", "MACs", "params");
        for (i, (label, macs, params)) in lines.iter().enumerate() {
            if i + 1 == lines.len() {
                out.push_str(&format!("{}\n", "-".repeat(lw + mw + pw + 4)));
            }
            out.push_str(&format!("{label:<lw$}  {macs:>mw$}  {params:>pw$}\n"));
        }
        out
    }
}

/// Decimal giga-MACs with at most two decimals, e.g. `4.3G`, `0.09G`.
pub fn format_giga(macs: u64) -> String {
    let s = format!("{:.2}", macs as f64 / 1e9);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("{s}G")
}

fn product(factors: &[usize]) -> Result<u64> {
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f as u64))
        .ok_or_else(|| Error::param(format!("MAC count for {factors:?} overflows u64")))
}

fn positive(extents: &[(&str, usize)]) -> Result<()> {
    match extents.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(Error::param(format!("extent {name} must be at least 1"))),
        None => Ok(()),
    }
}

/// Per-layer MACs and weight counts of one vanilla block.
pub fn macs_vanilla_block(n: usize, d: usize) -> Result<CostReport> {
    positive(&[("n", n), ("d", d)])?;
    let mut r = CostReport::new();
    r.push(labels::QKV, product(&[3, n, d, d])?, product(&[3, d, d])?);
    r.push(labels::LOGITS, product(&[n, n, d])?, 0);
    r.push(labels::WEIGHTED_SUM, product(&[n, n, d])?, 0);
    r.push(labels::PROJECTION, product(&[n, d, d])?, product(&[d, d])?);
    r.push(labels::MLP_EXPAND, product(&[2, n, d, d])?, product(&[2, d, d])?);
    r.push(labels::MLP_CONTRACT, product(&[2, n, d, d])?, product(&[2, d, d])?);
    Ok(r)
}

/// Per-layer MACs and weight counts of one FeatER block.
pub fn macs_feater_block(n: usize, h: usize, w: usize) -> Result<CostReport> {
    positive(&[("n", n), ("h", h), ("w", w)])?;
    let mut r = CostReport::new();
    r.push(labels::W_QKV, product(&[3, n, h, w, w])?, product(&[3, w, w])?);
    r.push(labels::W_LOGITS, product(&[n, n, h, w])?, 0);
    r.push(labels::W_WEIGHTED_SUM, product(&[n, n, h, w])?, 0);
    r.push(labels::H_QKV, product(&[3, n, h, h, w])?, product(&[3, h, h])?);
    r.push(labels::H_LOGITS, product(&[n, n, h, w])?, 0);
    r.push(labels::H_WEIGHTED_SUM, product(&[n, n, h, w])?, 0);
    r.push(labels::PROJECTION, product(&[n, n, h, w])?, product(&[n, n])?);
    r.push(labels::FFN_EXPAND, product(&[2, n, n, h, w])?, product(&[2, n, n])?);
    r.push(labels::FFN_CONTRACT, product(&[2, n, n, h, w])?, product(&[2, n, n])?);
    Ok(r)
}

/// Shape-based parameter count: one row per weight tensor plus a single row
/// for all biases and norm parameters.
pub fn count_params_layout(layout: &[(&str, Vec<usize>, ParamKind)]) -> Result<CostReport> {
    let mut r = CostReport::new();
    let mut other = 0u64;
    for (name, shape, kind) in layout {
        let count = product(shape)?;
        match kind {
            ParamKind::Weight => r.push(*name, 0, count),
            ParamKind::Bias | ParamKind::Norm => other += count,
        }
    }
    r.push(BIAS_AND_NORM_ROW, 0, other);
    Ok(r)
}

/// Blocks whose parameters can be counted.
pub trait CountParams {
    fn param_layout(&self) -> Vec<(&'static str, Vec<usize>, ParamKind)>;
}

impl CountParams for VanillaBlockParams {
    fn param_layout(&self) -> Vec<(&'static str, Vec<usize>, ParamKind)> {
        self.named()
            .into_iter()
            .map(|(n, k, t)| (n, t.shape().to_vec(), k))
            .collect()
    }
}

impl CountParams for FeatERBlockParams {
    fn param_layout(&self) -> Vec<(&'static str, Vec<usize>, ParamKind)> {
        self.named()
            .into_iter()
            .map(|(n, k, t)| (n, t.shape().to_vec(), k))
            .collect()
    }
}

pub fn count_params(p: &impl CountParams) -> Result<CostReport> {
    count_params_layout(&p.param_layout())
}

/// MACs tallied by a counting tape, one row per label.
pub fn count_macs_instrumented(tape: &Tape) -> Result<CostReport> {
    let counter = tape
        .mac_counter()
        .ok_or_else(|| Error::State("tape was recorded without MAC counting".into()))?;
    let mut r = CostReport::new();
    for (label, macs) in counter.rows() {
        r.push(label.clone(), *macs, 0);
    }
    Ok(r)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::param("log-log fit needs at least two positive points"));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::param("log-log fit needs at least two distinct x values"));
    }
    Ok(sxy / sxx)
}

/// Fitted exponent of FeatER block MACs in `d` with `h = w = √d`.
pub fn feater_scaling_exponent(n: usize, dims: &[usize]) -> Result<f64> {
    let points = dims
        .iter()
        .map(|&d| {
            let side = (d as f64).sqrt().round() as usize;
            if side * side != d {
                return Err(Error::param(format!("{d} is not a perfect square")));
            }
            Ok((d as f64, macs_feater_block(n, side, side)?.total_macs() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    loglog_slope(&points)
}

/// Fitted exponent of vanilla block MACs in `d`.
pub fn vanilla_scaling_exponent(n: usize, dims: &[usize]) -> Result<f64> {
    let points = dims
        .iter()
        .map(|&d| Ok((d as f64, macs_vanilla_block(n, d)?.total_macs() as f64)))
        .collect::<Result<Vec<_>>>()?;
    loglog_slope(&points)
}
