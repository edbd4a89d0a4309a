//! Reverse-mode differentiation over a recorded operation sequence.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! enough context for its backward rule. Node indices are assigned in
//! creation order, so walking them in reverse is a valid topological order.
//!
//! A tape created with [`Tape::with_mac_counting`] also tallies the
//! multiply-accumulates of every matrix product and channel convolution,
//! grouped under the label most recently passed to [`Tape::set_label`].

use crate::error::{Error, Result};
use crate::tensor::{
    self, conv_channel_1x1_backward, gelu_backward, gemm_acc, gemm_nt_acc, gemm_tn_acc,
    layer_norm_backward, softmax_backward, LayerNormStats, NormLayout, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, w: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Softmax { x: Var },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        layout: NormLayout,
        stats: LayerNormStats,
    },
    Gelu { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Reshape { x: Var },
    MaskChannels { x: Var, channels: Vec<usize> },
    Sum { x: Var },
    MeanSquaredError { a: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-label MAC tallies in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacCounter {
    rows: Vec<(String, u64)>,
}

impl MacCounter {
    fn record(&mut self, label: &str, macs: u64) {
        match self.rows.iter_mut().find(|(l, _)| l == label) {
            Some((_, total)) => *total += macs,
            None => self.rows.push((label.to_owned(), macs)),
        }
    }

    pub fn rows(&self) -> &[(String, u64)] {
        &self.rows
    }

    pub fn total(&self) -> u64 {
        self.rows.iter().map(|(_, m)| m).sum()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    counter: Option<MacCounter>,
    label: String,
}

/// Gradients of a scalar with respect to every recorded value that
/// influenced it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not reach the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::from_parts(like.shape().to_vec(), vec![0.0; like.len()]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mac_counting() -> Self {
        Self {
            counter: Some(MacCounter::default()),
            ..Self::default()
        }
    }

    pub fn counting_enabled(&self) -> bool {
        self.counter.is_some()
    }

    pub fn mac_counter(&self) -> Option<&MacCounter> {
        self.counter.as_ref()
    }

    /// Label under which subsequent MACs are tallied.
    pub fn set_label(&mut self, label: &str) {
        label.clone_into(&mut self.label);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn count(&mut self, macs: usize) {
        let label = &self.label;
        if let Some(c) = self.counter.as_mut() {
            c.record(label, macs as u64);
        }
    }

    /// Batched product `[*, p, q] · [*, q, r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, p, q, r) = tensor::kernels_dims(self.value(a), self.value(b))?;
        let value = tensor::matmul_batched(self.value(a), self.value(b))?;
        self.count(batch * p * q * r);
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    /// `x[..., q] · w[q, r] (+ b[r])`, sharing `w` across all leading positions.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::dim(format!(
                "linear map {ws:?} does not apply to input {xs:?}"
            )));
        }
        let (q, r) = (ws[0], ws[1]);
        let rows = self.value(x).len() / q;
        if let Some(b) = b {
            if self.value(b).shape() != [r] {
                return Err(Error::dim(format!(
                    "linear bias {:?} does not match weight {ws:?}",
                    self.value(b).shape()
                )));
            }
        }
        let mut out = vec![0.0; rows * r];
        if let Some(b) = b {
            for row in out.chunks_mut(r) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        gemm_acc(self.value(x).data(), self.value(w).data(), &mut out, rows, q, r);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = r;
        self.count(rows * q * r);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }))
    }

    /// 1×1 convolution mixing channels of a `[n_in, h, w]` stack.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = tensor::conv_channel_1x1(self.value(x), self.value(w), self.value(b))?;
        let macs = self.value(w).len() * (self.value(x).len() / self.value(x).shape()[0]);
        self.count(macs);
        Ok(self.push(value, Op::Conv { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        self.push(value, Op::Scale { x, factor })
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = tensor::softmax_lastdim(self.value(x))?;
        Ok(self.push(value, Op::Softmax { x }))
    }

    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        layout: NormLayout,
        eps: f64,
    ) -> Result<Var> {
        let (value, stats) = tensor::layer_norm_stats(
            self.value(x),
            layout,
            self.value(gain),
            self.value(bias),
            eps,
        )?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                layout,
                stats,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = tensor::gelu(self.value(x));
        self.push(value, Op::Gelu { x })
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Zero the listed slices of the first axis.
    pub fn mask_channels(&mut self, x: Var, channels: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let n = *src
            .shape()
            .first()
            .ok_or_else(|| Error::dim("channel mask on a rank-0 tensor"))?;
        if let Some(&bad) = channels.iter().find(|&&c| c >= n) {
            return Err(Error::dim(format!(
                "masked channel {bad} out of range for {n} channels"
            )));
        }
        let per = src.len() / n;
        let mut value = src.clone();
        for &c in channels {
            value.data_mut()[c * per..(c + 1) * per].fill(0.0);
        }
        Ok(self.push(
            value,
            Op::MaskChannels {
                x,
                channels: channels.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x })
    }

    /// Mean over all entries of `(a − b)²`, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb)?;
        let total: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(total / va.len() as f64);
        Ok(self.push(value, Op::MeanSquaredError { a, b }))
    }

    /// Gradients of the scalar `loss` with respect to all recorded values.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), d)))
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (batch, p, q, r) = tensor::kernels_dims(va, vb).expect("checked in forward");
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for s in 0..batch {
                    let gs = &g[s * p * r..(s + 1) * p * r];
                    gemm_nt_acc(
                        gs,
                        &vb.data()[s * q * r..(s + 1) * q * r],
                        &mut da[s * p * q..(s + 1) * p * q],
                        p,
                        r,
                        q,
                    );
                    gemm_tn_acc(
                        &va.data()[s * p * q..(s + 1) * p * q],
                        gs,
                        &mut db[s * q * r..(s + 1) * q * r],
                        q,
                        p,
                        r,
                    );
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (q, r) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.len() / q;
                let mut dx = vec![0.0; vx.len()];
                gemm_nt_acc(g, vw.data(), &mut dx, rows, r, q);
                let mut dw = vec![0.0; vw.len()];
                gemm_tn_acc(vx.data(), g, &mut dw, q, rows, r);
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                if let Some(b) = b {
                    let mut db = vec![0.0; r];
                    for row in g.chunks(r) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Conv { x, w, b } => {
                let (dx, dw, db) = conv_channel_1x1_backward(g, self.value(*x), self.value(*w));
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.iter().zip(vb.data()).map(|(x, y)| x * y).collect());
                accumulate(grads, *b, g.iter().zip(va.data()).map(|(x, y)| x * y).collect());
            }
            Op::Scale { x, factor } => {
                accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
            }
            Op::Softmax { x } => {
                accumulate(grads, *x, softmax_backward(&node.value, g));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                layout,
                stats,
            } => {
                let (dx, dg, db) = layer_norm_backward(
                    g,
                    stats,
                    *layout,
                    self.value(*x).shape(),
                    self.value(*gain),
                );
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dg);
                accumulate(grads, *bias, db);
            }
            Op::Gelu { x } => {
                accumulate(grads, *x, gelu_backward(self.value(*x), g));
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (k, &a) in axes.iter().enumerate() {
                    inverse[a] = k;
                }
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let back = gt.permute(&inverse).expect("inverse of a valid permutation");
                accumulate(grads, *x, back.into_data());
            }
            Op::Reshape { x } => accumulate(grads, *x, g.to_vec()),
            Op::MaskChannels { x, channels } => {
                let per = node.value.len() / node.value.shape()[0];
                let mut d = g.to_vec();
                for &c in channels {
                    d[c * per..(c + 1) * per].fill(0.0);
                }
                accumulate(grads, *x, d);
            }
            Op::Sum { x } => {
                accumulate(grads, *x, vec![g[0]; self.value(*x).len()]);
            }
            Op::MeanSquaredError { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g[0] / va.len() as f64;
                let da: Vec<f64> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| k * (x - y))
                    .collect();
                let db = da.iter().map(|v| -v).collect();
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn counts_only_products() {
        let mut tape = Tape::with_mac_counting();
        let mut rng = RngStream::new(0, "tape");
        let a = tape.leaf(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng).unwrap());
        let b = tape.leaf(Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng).unwrap());
        tape.set_label("mm");
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax(c).unwrap();
        let _ = tape.gelu(s);
        let counter = tape.mac_counter().unwrap();
        assert_eq!(counter.total(), 60);
        assert_eq!(counter.rows(), &[("mm".to_string(), 60)]);
    }

    #[test]
    fn unreached_values_have_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.0));
        let b = tape.leaf(Tensor::scalar(2.0));
        let l = tape.scale(a, 5.0);
        let g = tape.backward(l).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.get_or_zeros(b, tape.value(b)).item().unwrap(), 0.0);
        assert_eq!(g.get(a).unwrap().item().unwrap(), 5.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]).unwrap());
        assert!(matches!(tape.backward(a), Err(Error::Dimension(_))));
    }
}
