//! Transformer blocks over flattened tokens and over intact feature maps.

mod checkpoint;
mod feater;
mod params;
mod stack;
mod vanilla;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, MANIFEST_FILE};
pub use feater::{
    attention_h, attention_h_on, attention_h_probs, attention_w, attention_w_on,
    attention_w_probs, feater_block_forward, feater_block_on, feater_ffn, feater_ffn_on,
};
pub use params::{FeatERBlockParams, FeatERBlockVars, ParamKind, VanillaBlockParams, VanillaBlockVars};
pub use stack::{
    feater_stack_on, stack_forward, vanilla_stack_on, Architecture, BlockStackConfig, InitScheme,
    StackParams, StackShape,
};
pub use vanilla::{vanilla_block_forward, vanilla_block_on, vanilla_msa, vanilla_msa_on};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// MAC-counter labels used by the block forwards and the analytical model.
pub mod labels {
    pub const QKV: &str = "qkv";
    pub const LOGITS: &str = "attention logits";
    pub const WEIGHTED_SUM: &str = "attention weighted sum";
    pub const PROJECTION: &str = "projection";
    pub const MLP_EXPAND: &str = "mlp expand";
    pub const MLP_CONTRACT: &str = "mlp contract";

    pub const W_QKV: &str = "w-stream qkv";
    pub const W_LOGITS: &str = "w-stream logits";
    pub const W_WEIGHTED_SUM: &str = "w-stream weighted sum";
    pub const H_QKV: &str = "h-stream qkv";
    pub const H_LOGITS: &str = "h-stream logits";
    pub const H_WEIGHTED_SUM: &str = "h-stream weighted sum";
    pub const FFN_EXPAND: &str = "ffn expand";
    pub const FFN_CONTRACT: &str = "ffn contract";
}

/// `n` feature maps over an `h × w` grid, shape `[n, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapStack(Tensor);

impl FeatureMapStack {
    pub fn new(tensor: Tensor) -> Result<Self> {
        match tensor.shape() {
            &[n, h, w] if n >= 1 && h >= 2 && w >= 2 => Ok(Self(tensor)),
            s => Err(Error::dim(format!(
                "feature-map stack needs shape [n>=1, h>=2, w>=2], got {s:?}"
            ))),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn h(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.0.shape()[2]
    }
}

/// `n` tokens of embedding dimension `d`, shape `[n, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix(Tensor);

impl TokenMatrix {
    pub fn new(tensor: Tensor) -> Result<Self> {
        match tensor.shape() {
            &[_, _] => Ok(Self(tensor)),
            s => Err(Error::dim(format!("token matrix needs shape [n, d], got {s:?}"))),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Row-major flattening of each map: `[n, h, w]` → `[n, h·w]`.
pub fn flatten_stack(x: &FeatureMapStack) -> TokenMatrix {
    let d = x.h() * x.w();
    TokenMatrix(x.0.reshape(&[x.n(), d]).expect("same element count"))
}

/// Inverse of [`flatten_stack`].
pub fn unflatten_tokens(t: &TokenMatrix, h: usize, w: usize) -> Result<FeatureMapStack> {
    if h.checked_mul(w) != Some(t.d()) {
        return Err(Error::dim(format!(
            "token dimension {} does not equal h·w = {h}·{w}",
            t.d()
        )));
    }
    FeatureMapStack::new(t.0.reshape(&[t.n(), h, w])?)
}

/// Scaled dot-product attention across the token axis of `[batch, tokens,
/// features]` inputs, with `heads` equal slices of the feature axis.
///
/// Returns the attended values (same shape as `v`) and the attention weights
/// `[batch·heads, tokens, tokens]`.
pub(crate) fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    logits_label: &str,
    sum_label: &str,
) -> Result<(Var, Var)> {
    let shape = tape.value(q).shape().to_vec();
    let &[batch, tokens, features] = shape.as_slice() else {
        return Err(Error::dim(format!("attention input must be rank 3, got {shape:?}")));
    };
    if heads == 0 || features % heads != 0 {
        return Err(Error::dim(format!(
            "{features} features cannot be split into {heads} heads"
        )));
    }
    let head_dim = features / heads;
    let split = |tape: &mut Tape, x: Var| -> Result<Var> {
        if heads == 1 {
            return Ok(x);
        }
        let r = tape.reshape(x, &[batch, tokens, heads, head_dim])?;
        let p = tape.permute(r, &[0, 2, 1, 3])?;
        tape.reshape(p, &[batch * heads, tokens, head_dim])
    };
    let qs = split(tape, q)?;
    let ks = split(tape, k)?;
    let vs = split(tape, v)?;
    let kt = tape.permute(ks, &[0, 2, 1])?;
    tape.set_label(logits_label);
    let logits = tape.matmul(qs, kt)?;
    let scaled = tape.scale(logits, 1.0 / (head_dim as f64).sqrt());
    let probs = tape.softmax(scaled)?;
    tape.set_label(sum_label);
    let out = tape.matmul(probs, vs)?;
    let merged = if heads == 1 {
        out
    } else {
        let r = tape.reshape(out, &[batch, heads, tokens, head_dim])?;
        let p = tape.permute(r, &[0, 2, 1, 3])?;
        tape.reshape(p, &[batch, tokens, features])?
    };
    Ok((merged, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn flatten_is_row_major() {
        let x = FeatureMapStack::new(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let t = flatten_stack(&x);
        assert_eq!(t.tensor().shape(), &[1, 4]);
        assert_eq!(t.tensor().data(), &[1.0, 2.0, 3.0, 4.0]);
        let back = unflatten_tokens(&t, 2, 2).unwrap();
        assert_eq!(back.tensor().get(&[0, 1, 0]).unwrap(), 3.0);
    }

    #[test]
    fn flatten_shapes_and_round_trip() {
        let mut rng = RngStream::new(0, "flatten");
        let x = FeatureMapStack::new(Tensor::normal(&[3, 4, 5], 1.0, &mut rng).unwrap()).unwrap();
        let t = flatten_stack(&x);
        assert_eq!(t.tensor().shape(), &[3, 20]);
        assert_eq!(unflatten_tokens(&t, 4, 5).unwrap(), x);
        assert!(matches!(unflatten_tokens(&t, 4, 6), Err(Error::Dimension(_))));
    }

    #[test]
    fn stack_shape_invariants() {
        assert!(FeatureMapStack::new(Tensor::zeros(&[2, 1, 4]).unwrap()).is_err());
        assert!(FeatureMapStack::new(Tensor::zeros(&[2, 4]).unwrap()).is_err());
        assert!(TokenMatrix::new(Tensor::zeros(&[2, 4, 1]).unwrap()).is_err());
    }
}
