//! Straight-line reference blocks: nested loops over plain slices, written
//! directly from the block equations. Nothing here touches the tape or the
//! library kernels.

use feater_core::blocks::{FeatERBlockParams, VanillaBlockParams};
use feater_core::Tensor;

const EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Tokens `x[t][j]`, weights `wq/wk/wv[j][j']` (x · W). Attention across the
/// token axis, features split into `heads` equal slices.
fn attention(x: &[Vec<f64>], wq: &Tensor, wk: &Tensor, wv: &Tensor, heads: usize) -> Vec<Vec<f64>> {
    let t = x.len();
    let f = x[0].len();
    let project = |w: &Tensor| -> Vec<Vec<f64>> {
        (0..t)
            .map(|i| (0..f).map(|j| (0..f).map(|k| x[i][k] * w.data()[k * f + j]).sum()).collect())
            .collect()
    };
    let (q, k, v) = (project(wq), project(wk), project(wv));
    let dh = f / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![0.0; f]; t];
    for head in 0..heads {
        let cols = head * dh..(head + 1) * dh;
        for i in 0..t {
            let mut row: Vec<f64> = (0..t)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale)
                .collect();
            softmax_in_place(&mut row);
            for c in cols.clone() {
                out[i][c] = (0..t).map(|j| row[j] * v[j][c]).sum();
            }
        }
    }
    out
}

/// `x[c][r][s]` as nested vectors.
type Maps = Vec<Vec<Vec<f64>>>;

fn to_maps(x: &Tensor) -> Maps {
    let (n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    (0..n)
        .map(|c| (0..h).map(|r| (0..w).map(|s| x.data()[(c * h + r) * w + s]).collect()).collect())
        .collect()
}

fn from_maps(m: &Maps) -> Tensor {
    let shape = vec![m.len(), m[0].len(), m[0][0].len()];
    Tensor::new(shape, m.iter().flatten().flatten().copied().collect()).unwrap()
}

fn channel_norm(x: &Maps, gain: &Tensor, bias: &Tensor) -> Maps {
    x.iter()
        .enumerate()
        .map(|(c, map)| {
            let count = (map.len() * map[0].len()) as f64;
            let mean = map.iter().flatten().sum::<f64>() / count;
            let var = map.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            let (g, b) = (gain.data()[c], bias.data()[c]);
            map.iter()
                .map(|row| row.iter().map(|v| g * (v - mean) / (var + EPS).sqrt() + b).collect())
                .collect()
        })
        .collect()
}

/// `out[o] = Σ_c W[o][c] x[c] + b[o]` at every pixel.
fn conv(x: &Maps, wt: &Tensor, b: &Tensor) -> Maps {
    let (n_out, n_in) = (wt.shape()[0], wt.shape()[1]);
    let (h, w) = (x[0].len(), x[0][0].len());
    (0..n_out)
        .map(|o| {
            (0..h)
                .map(|r| {
                    (0..w)
                        .map(|s| (0..n_in).map(|c| wt.data()[o * n_in + c] * x[c][r][s]).sum::<f64>() + b.data()[o])
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn feater_attention_w(y: &Maps, p: &FeatERBlockParams) -> Maps {
    let (n, h, w) = (y.len(), y[0].len(), y[0][0].len());
    let mut out = vec![vec![vec![0.0; w]; h]; n];
    for r in 0..h {
        let tokens: Vec<Vec<f64>> = (0..n).map(|c| y[c][r].clone()).collect();
        let a = attention(&tokens, &p.w_q_w, &p.w_k_w, &p.w_v_w, p.heads);
        for c in 0..n {
            out[c][r] = a[c].clone();
        }
    }
    out
}

pub fn feater_attention_h(y: &Maps, p: &FeatERBlockParams) -> Maps {
    let (n, h, w) = (y.len(), y[0].len(), y[0][0].len());
    let mut out = vec![vec![vec![0.0; w]; h]; n];
    for s in 0..w {
        let tokens: Vec<Vec<f64>> = (0..n).map(|c| (0..h).map(|r| y[c][r][s]).collect()).collect();
        let a = attention(&tokens, &p.w_q_h, &p.w_k_h, &p.w_v_h, p.heads);
        for c in 0..n {
            for r in 0..h {
                out[c][r][s] = a[c][r];
            }
        }
    }
    out
}

pub fn feater_block(x: &Tensor, p: &FeatERBlockParams) -> Tensor {
    let x = to_maps(x);
    let y = channel_norm(&x, &p.ln1_gain, &p.ln1_bias);
    let aw = feater_attention_w(&y, p);
    let ah = feater_attention_h(&y, p);
    let mut a = aw.clone();
    for (c, map) in a.iter_mut().enumerate() {
        for (r, row) in map.iter_mut().enumerate() {
            for (s, v) in row.iter_mut().enumerate() {
                *v += ah[c][r][s];
            }
        }
    }
    let a = conv(&a, &p.proj_weight, &p.proj_bias);
    let mut u = x.clone();
    for c in 0..u.len() {
        for r in 0..u[0].len() {
            for s in 0..u[0][0].len() {
                u[c][r][s] += a[c][r][s];
            }
        }
    }
    let y2 = channel_norm(&u, &p.ln2_gain, &p.ln2_bias);
    let mut hidden = conv(&y2, &p.ffn1_weight, &p.ffn1_bias);
    hidden.iter_mut().flatten().flatten().for_each(|v| *v = gelu(*v));
    let f = conv(&hidden, &p.ffn2_weight, &p.ffn2_bias);
    let mut out = u;
    for c in 0..out.len() {
        for r in 0..out[0].len() {
            for s in 0..out[0][0].len() {
                out[c][r][s] += f[c][r][s];
            }
        }
    }
    from_maps(&out)
}

fn token_norm(x: &[Vec<f64>], gain: &Tensor, bias: &Tensor) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, v)| gain.data()[j] * (v - mean) / (var + EPS).sqrt() + bias.data()[j])
                .collect()
        })
        .collect()
}

/// `x · W + b` with `W` shaped `[in, out]`.
fn affine(x: &[Vec<f64>], wt: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (fin, fout) = (wt.shape()[0], wt.shape()[1]);
    x.iter()
        .map(|row| (0..fout).map(|j| (0..fin).map(|k| row[k] * wt.data()[k * fout + j]).sum::<f64>() + b.data()[j]).collect())
        .collect()
}

pub fn vanilla_block(x: &Tensor, p: &VanillaBlockParams) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let x: Vec<Vec<f64>> = (0..n).map(|i| x.data()[i * d..(i + 1) * d].to_vec()).collect();
    let y = token_norm(&x, &p.ln1_gain, &p.ln1_bias);
    let a = attention(&y, &p.w_q, &p.w_k, &p.w_v, p.heads);
    let a = affine(&a, &p.proj_weight, &p.proj_bias);
    let u: Vec<Vec<f64>> = x.iter().zip(&a).map(|(r, s)| r.iter().zip(s).map(|(p, q)| p + q).collect()).collect();
    let y2 = token_norm(&u, &p.ln2_gain, &p.ln2_bias);
    let mut hidden = affine(&y2, &p.mlp1_weight, &p.mlp1_bias);
    hidden.iter_mut().flatten().for_each(|v| *v = gelu(*v));
    let m = affine(&hidden, &p.mlp2_weight, &p.mlp2_bias);
    let out: Vec<f64> = u.iter().zip(&m).flat_map(|(r, s)| r.iter().zip(s).map(|(p, q)| p + q).collect::<Vec<_>>()).collect();
    Tensor::new(vec![n, d], out).unwrap()
}
