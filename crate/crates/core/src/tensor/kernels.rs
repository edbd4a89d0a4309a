use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-5;

/// Rows of the left operand processed per pass over the right operand.
const ROW_BLOCK: usize = 64;

/// `c[p, r] += a[p, q] · b[q, r]`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    debug_assert!(a.len() == p * q && b.len() == q * r && c.len() == p * r);
    // k outer within a row block: each row of b is streamed once per block
    for i0 in (0..p).step_by(ROW_BLOCK) {
        let i1 = (i0 + ROW_BLOCK).min(p);
        for k in 0..q {
            let b_row = &b[k * r..(k + 1) * r];
            for i in i0..i1 {
                let a_ik = a[i * q + k];
                if a_ik == 0.0 {
                    continue;
                }
                let c_row = &mut c[i * r..(i + 1) * r];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += a_ik * bv;
                }
            }
        }
    }
}

/// `c[p, r] += a[p, q] · b[r, q]ᵀ`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    debug_assert!(a.len() == p * q && b.len() == r * q && c.len() == p * r);
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let b_row = &b[j * q..(j + 1) * q];
            c[i * r + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[p, r] += a[q, p]ᵀ · b[q, r]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    debug_assert!(a.len() == q * p && b.len() == q * r && c.len() == p * r);
    for k in 0..q {
        let b_row = &b[k * r..(k + 1) * r];
        for i in 0..p {
            let a_ki = a[k * p + i];
            if a_ki == 0.0 {
                continue;
            }
            let c_row = &mut c[i * r..(i + 1) * r];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ki * bv;
            }
        }
    }
}

/// Batched product of `[*, p, q]` and `[*, q, r]` with identical leading dims.
pub fn matmul_batched(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, p, q, r) = matmul_dims(a, b)?;
    let mut out = vec![0.0; batch * p * r];
    for s in 0..batch {
        gemm_acc(
            &a.data()[s * p * q..(s + 1) * p * q],
            &b.data()[s * q * r..(s + 1) * q * r],
            &mut out[s * p * r..(s + 1) * p * r],
            p,
            q,
            r,
        );
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = r;
    Ok(Tensor::from_parts(shape, out))
}

/// `(batch, p, q, r)` for a conforming batched product.
pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    let mismatch = || Error::dim(format!("cannot multiply {sa:?} by {sb:?}"));
    if sa.len() < 2 || sa.len() != sb.len() {
        return Err(mismatch());
    }
    let k = sa.len();
    if sa[..k - 2] != sb[..k - 2] || sa[k - 1] != sb[k - 2] {
        return Err(mismatch());
    }
    let batch = sa[..k - 2].iter().product();
    Ok((batch, sa[k - 2], sa[k - 1], sb[k - 1]))
}

/// Softmax over the last axis, stabilised by subtracting the slice maximum.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let last = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("softmax of a rank-0 tensor has no last dimension"))?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(last) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward(y: &Tensor, dy: &[f64]) -> Vec<f64> {
    let last = *y.shape().last().unwrap();
    let mut dx = vec![0.0; dy.len()];
    for ((yr, dyr), dxr) in y
        .data()
        .chunks(last)
        .zip(dy.chunks(last))
        .zip(dx.chunks_mut(last))
    {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Which axes a layer norm reduces over and how its affine parameters index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormLayout {
    /// Normalise over the last axis; gain/bias have that axis' extent.
    LastAxis,
    /// Normalise each slice of the first axis over all remaining axes;
    /// gain/bias hold one value per slice.
    PerChannel,
}

impl NormLayout {
    /// `(slices, slice_len, affine_len)`
    fn geometry(self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        let numel: usize = shape.iter().product();
        match self {
            NormLayout::LastAxis => {
                let last = *shape
                    .last()
                    .ok_or_else(|| Error::dim("layer norm of a rank-0 tensor"))?;
                Ok((numel / last, last, last))
            }
            NormLayout::PerChannel => {
                if shape.len() < 2 {
                    return Err(Error::dim(format!(
                        "per-channel layer norm needs rank >= 2, got {shape:?}"
                    )));
                }
                Ok((shape[0], numel / shape[0], shape[0]))
            }
        }
    }

    fn affine_index(self, slice: usize, pos: usize) -> usize {
        match self {
            NormLayout::LastAxis => pos,
            NormLayout::PerChannel => slice,
        }
    }
}

pub(crate) struct LayerNormStats {
    pub(crate) normalized: Vec<f64>,
    pub(crate) inv_std: Vec<f64>,
}

/// Layer normalisation followed by the affine map `gain · x̂ + bias`.
pub fn layer_norm(
    x: &Tensor,
    layout: NormLayout,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    layer_norm_with_stats(x, layout, gain, bias, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_with_stats(
    x: &Tensor,
    layout: NormLayout,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormStats)> {
    if !(eps > 0.0) {
        return Err(Error::param(format!("layer norm eps must be positive, got {eps}")));
    }
    let (slices, len, affine_len) = layout.geometry(x.shape())?;
    for (name, t) in [("gain", gain), ("bias", bias)] {
        if t.len() != affine_len || t.rank() != 1 {
            return Err(Error::dim(format!(
                "layer norm {name} of shape {:?} does not match input {:?} under {layout:?}",
                t.shape(),
                x.shape()
            )));
        }
    }
    let mut out = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(slices);
    for s in 0..slices {
        let row = &x.data()[s * len..(s + 1) * len];
        let mean = row.iter().sum::<f64>() / len as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        inv_std.push(rstd);
        for (j, &v) in row.iter().enumerate() {
            let xh = (v - mean) * rstd;
            let a = layout.affine_index(s, j);
            normalized[s * len + j] = xh;
            out[s * len + j] = xh * gain.data()[a] + bias.data()[a];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        LayerNormStats {
            normalized,
            inv_std,
        },
    ))
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    stats: &LayerNormStats,
    layout: NormLayout,
    shape: &[usize],
    gain: &Tensor,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (slices, len, affine_len) = layout.geometry(shape).expect("validated in forward");
    let mut dx = vec![0.0; dy.len()];
    let mut dgain = vec![0.0; affine_len];
    let mut dbias = vec![0.0; affine_len];
    let mut dxhat = vec![0.0; len];
    for s in 0..slices {
        let base = s * len;
        let (mut mean_d, mut mean_dx) = (0.0, 0.0);
        for j in 0..len {
            let a = layout.affine_index(s, j);
            let g = dy[base + j];
            let xh = stats.normalized[base + j];
            dgain[a] += g * xh;
            dbias[a] += g;
            dxhat[j] = g * gain.data()[a];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh;
        }
        mean_d /= len as f64;
        mean_dx /= len as f64;
        let rstd = stats.inv_std[s];
        for j in 0..len {
            let xh = stats.normalized[base + j];
            dx[base + j] = rstd * (dxhat[j] - mean_d - xh * mean_dx);
        }
    }
    (dx, dgain, dbias)
}

/// Pixel-wise channel mixing: `[n_in, h, w]` → `[n_out, h, w]`.
pub fn conv_channel_1x1(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n_out, n_in, pixels) = conv_dims(x, weight, bias)?;
    let mut out = vec![0.0; n_out * pixels];
    for (o, row) in out.chunks_mut(pixels).enumerate() {
        row.fill(bias.data()[o]);
    }
    gemm_acc(weight.data(), x.data(), &mut out, n_out, n_in, pixels);
    let mut shape = x.shape().to_vec();
    shape[0] = n_out;
    Ok(Tensor::from_parts(shape, out))
}

/// `(n_out, n_in, pixels)`
pub(crate) fn conv_dims(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let (sx, sw) = (x.shape(), weight.shape());
    if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[0] {
        return Err(Error::dim(format!(
            "1x1 conv weight {sw:?} does not match input {sx:?}"
        )));
    }
    if bias.shape() != [sw[0]] {
        return Err(Error::dim(format!(
            "1x1 conv bias {:?} does not match weight {sw:?}",
            bias.shape()
        )));
    }
    Ok((sw[0], sw[1], sx[1] * sx[2]))
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv_channel_1x1_backward(
    dy: &[f64],
    x: &Tensor,
    weight: &Tensor,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n_out, n_in) = (weight.shape()[0], weight.shape()[1]);
    let pixels = x.len() / n_in;
    let mut dx = vec![0.0; x.len()];
    gemm_tn_acc(weight.data(), dy, &mut dx, n_in, n_out, pixels);
    let mut dw = vec![0.0; n_out * n_in];
    gemm_nt_acc(dy, x.data(), &mut dw, n_out, pixels, n_in);
    let db = dy.chunks(pixels).map(|r| r.iter().sum()).collect();
    (dx, dw, db)
}

fn gelu_scalar(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2))
}

/// Exact (erf) GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub(crate) fn gelu_backward(x: &Tensor, dy: &[f64]) -> Vec<f64> {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    x.data()
        .iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
            let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
            g * (cdf + v * pdf)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn naive_matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
        let mut c = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                for k in 0..q {
                    c[i * r + j] += a[i * q + k] * b[k * r + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = RngStream::new(1, "kernels");
        let b = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng).unwrap();
        assert_eq!(matmul_batched(&Tensor::eye(3).unwrap(), &b).unwrap(), b);
        let z = Tensor::zeros(&[2, 4]).unwrap();
        let any = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng).unwrap();
        assert_eq!(
            matmul_batched(&z, &any).unwrap(),
            Tensor::zeros(&[2, 5]).unwrap()
        );
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(2, "kernels");
        let a = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng).unwrap();
        let c = matmul_batched(&a, &b).unwrap();
        for s in 0..3 {
            let expect = naive_matmul(
                &a.data()[s * 16..(s + 1) * 16],
                &b.data()[s * 16..(s + 1) * 16],
                4,
                4,
                4,
            );
            for (x, y) in c.data()[s * 16..(s + 1) * 16].iter().zip(&expect) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_errors_name_both_shapes() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[4, 5]).unwrap();
        let msg = matmul_batched(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
        let b3 = Tensor::zeros(&[2, 3, 5]).unwrap();
        assert!(matmul_batched(&a, &b3).is_err());
    }

    #[test]
    fn gemm_variants_agree() {
        let mut rng = RngStream::new(3, "kernels");
        let a = Tensor::uniform(&[70, 5], -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::uniform(&[5, 6], -1.0, 1.0, &mut rng).unwrap();
        let reference = naive_matmul(a.data(), b.data(), 70, 5, 6);
        let mut nt = vec![0.0; 70 * 6];
        gemm_nt_acc(a.data(), b.transpose_last2().unwrap().data(), &mut nt, 70, 5, 6);
        let mut tn = vec![0.0; 70 * 6];
        gemm_tn_acc(a.transpose_last2().unwrap().data(), b.data(), &mut tn, 70, 5, 6);
        for ((r, x), y) in reference.iter().zip(&nt).zip(&tn) {
            assert!((r - x).abs() < 1e-12 && (r - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_known_values() {
        let u = softmax_lastdim(&Tensor::zeros(&[4]).unwrap()).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let t = Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap();
        let s = softmax_lastdim(&t).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
        assert!(matches!(
            softmax_lastdim(&Tensor::scalar(1.0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = RngStream::new(4, "kernels");
        let x = Tensor::uniform(&[7], -3.0, 3.0, &mut rng).unwrap();
        let s = softmax_lastdim(&x).unwrap();
        let total: f64 = x.data().iter().map(|v| v.exp()).sum();
        for (v, y) in x.data().iter().zip(s.data()) {
            assert!((v.exp() / total - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full(&[3], 1.0).unwrap();
        let zero = Tensor::zeros(&[3]).unwrap();
        let y = layer_norm(
            &Tensor::full(&[3], 2.0).unwrap(),
            NormLayout::LastAxis,
            &one,
            &zero,
            1e-5,
        )
        .unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));

        let g = Tensor::full(&[2], 1.0).unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        let x = Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap();
        let y = layer_norm(&x, NormLayout::LastAxis, &g, &b, 1e-5).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);

        assert!(matches!(
            layer_norm(&x, NormLayout::LastAxis, &g, &b, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn layer_norm_matches_mean_variance_oracle() {
        let mut rng = RngStream::new(5, "kernels");
        let x = Tensor::uniform(&[3, 2, 4], -2.0, 2.0, &mut rng).unwrap();
        let gain = Tensor::uniform(&[3], 0.5, 1.5, &mut rng).unwrap();
        let bias = Tensor::uniform(&[3], -0.5, 0.5, &mut rng).unwrap();
        let y = layer_norm(&x, NormLayout::PerChannel, &gain, &bias, 1e-5).unwrap();
        for c in 0..3 {
            let s = &x.data()[c * 8..(c + 1) * 8];
            let mean = s.iter().sum::<f64>() / 8.0;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for (j, v) in s.iter().enumerate() {
                let e = (v - mean) / (var + 1e-5).sqrt() * gain.data()[c] + bias.data()[c];
                assert!((e - y.data()[c * 8 + j]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn conv_examples() {
        let mut rng = RngStream::new(6, "kernels");
        let x = Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut rng).unwrap();
        let zb = Tensor::zeros(&[3]).unwrap();
        assert_eq!(
            conv_channel_1x1(&x, &Tensor::eye(3).unwrap(), &zb).unwrap(),
            x
        );
        let c = conv_channel_1x1(
            &x,
            &Tensor::zeros(&[2, 3]).unwrap(),
            &Tensor::full(&[2], 0.7).unwrap(),
        )
        .unwrap();
        assert!(c.data().iter().all(|&v| v == 0.7));
        assert!(conv_channel_1x1(&x, &Tensor::zeros(&[2, 4]).unwrap(), &zb).is_err());
    }

    #[test]
    fn conv_matches_per_pixel_matmul() {
        let mut rng = RngStream::new(7, "kernels");
        let x = Tensor::uniform(&[4, 3, 5], -1.0, 1.0, &mut rng).unwrap();
        let w = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::uniform(&[6], -1.0, 1.0, &mut rng).unwrap();
        let y = conv_channel_1x1(&x, &w, &b).unwrap();
        for r in 0..3 {
            for c in 0..5 {
                for o in 0..6 {
                    let mut acc = b.data()[o];
                    for i in 0..4 {
                        acc += w.get(&[o, i]).unwrap() * x.get(&[i, r, c]).unwrap();
                    }
                    assert!((acc - y.get(&[o, r, c]).unwrap()).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn gelu_reference_points() {
        let x = Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((y.data()[2] + 0.158_655_253_931_457_05).abs() < 1e-12);
    }
}
