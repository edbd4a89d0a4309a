//! Learnable tensors of one block of each architecture.
//!
//! Linear weights are stored `[in, out]` and applied as `x · W`; channel
//! convolution weights are stored `[out, in]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Matrix applied by a linear layer or channel convolution.
    Weight,
    Bias,
    /// Layer-norm gain or bias.
    Norm,
}

macro_rules! block_params {
    (
        $(#[$meta:meta])*
        $params:ident / $vars:ident { $($field:ident: $kind:ident),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $params {
            pub heads: usize,
            $(pub $field: Tensor,)+
        }

        /// Tape handles for the tensors of one registered block.
        #[derive(Debug, Clone, Copy)]
        pub struct $vars {
            pub heads: usize,
            $(pub $field: Var,)+
        }

        impl $params {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),+];

            pub fn named(&self) -> Vec<(&'static str, ParamKind, &Tensor)> {
                vec![$((stringify!($field), ParamKind::$kind, &self.$field)),+]
            }

            pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
                vec![$((stringify!($field), &mut self.$field)),+]
            }

            /// Rebuilds a block from tensors looked up by name.
            pub fn from_named(
                heads: usize,
                mut lookup: impl FnMut(&str) -> Result<Tensor>,
            ) -> Result<Self> {
                let p = Self { heads, $($field: lookup(stringify!($field))?,)+ };
                p.validate()?;
                Ok(p)
            }

            /// Records copies of all tensors as tape leaves.
            pub fn register(&self, tape: &mut Tape) -> $vars {
                $vars { heads: self.heads, $($field: tape.leaf(self.$field.clone()),)+ }
            }

            /// Moves all tensors onto the tape.
            pub fn into_registered(self, tape: &mut Tape) -> $vars {
                $vars { heads: self.heads, $($field: tape.leaf(self.$field),)+ }
            }
        }

        impl $vars {
            pub fn vars(&self) -> Vec<(&'static str, Var)> {
                vec![$((stringify!($field), self.$field)),+]
            }

            /// Inverse of [`Self::vars`]: one var per name, in declaration order.
            pub fn from_vars(heads: usize, vars: &[Var]) -> Result<Self> {
                let expect = $params::NAMES.len();
                if vars.len() != expect {
                    return Err(Error::dim(format!(
                        "expected {expect} vars, got {}",
                        vars.len()
                    )));
                }
                let mut it = vars.iter().copied();
                Ok(Self { heads, $($field: it.next().unwrap(),)+ })
            }
        }
    };
}

block_params! {
    /// Vanilla block over `[n, d]` tokens.
    VanillaBlockParams / VanillaBlockVars {
        ln1_gain: Norm,
        ln1_bias: Norm,
        w_q: Weight,
        w_k: Weight,
        w_v: Weight,
        proj_weight: Weight,
        proj_bias: Bias,
        ln2_gain: Norm,
        ln2_bias: Norm,
        mlp1_weight: Weight,
        mlp1_bias: Bias,
        mlp2_weight: Weight,
        mlp2_bias: Bias,
    }
}

block_params! {
    /// FeatER block over `[n, h, w]` feature maps. `*_w` matrices act along
    /// the width axis, `*_h` along the height axis.
    FeatERBlockParams / FeatERBlockVars {
        ln1_gain: Norm,
        ln1_bias: Norm,
        w_q_w: Weight,
        w_k_w: Weight,
        w_v_w: Weight,
        w_q_h: Weight,
        w_k_h: Weight,
        w_v_h: Weight,
        proj_weight: Weight,
        proj_bias: Bias,
        ln2_gain: Norm,
        ln2_bias: Norm,
        ffn1_weight: Weight,
        ffn1_bias: Bias,
        ffn2_weight: Weight,
        ffn2_bias: Bias,
    }
}

fn check_shape(name: &str, t: &Tensor, expect: &[usize]) -> Result<()> {
    if t.shape() != expect {
        return Err(Error::dim(format!(
            "{name} has shape {:?}, expected {expect:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Weights uniform in `±1/√fan_in`; biases zero; norm gain 1 and bias 0.
fn init_tensor(shape: &[usize], kind: ParamKind, fan_in: usize, gain: bool, rng: &mut RngStream) -> Result<Tensor> {
    match kind {
        ParamKind::Weight => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::uniform(shape, -bound, bound, rng)
        }
        ParamKind::Norm if gain => Tensor::full(shape, 1.0),
        _ => Tensor::zeros(shape),
    }
}

impl VanillaBlockParams {
    /// `(name, shape, kind)` for embedding dimension `d`, without allocating.
    pub fn layout(d: usize) -> Vec<(&'static str, Vec<usize>, ParamKind)> {
        use ParamKind::*;
        vec![
            ("ln1_gain", vec![d], Norm),
            ("ln1_bias", vec![d], Norm),
            ("w_q", vec![d, d], Weight),
            ("w_k", vec![d, d], Weight),
            ("w_v", vec![d, d], Weight),
            ("proj_weight", vec![d, d], Weight),
            ("proj_bias", vec![d], Bias),
            ("ln2_gain", vec![d], Norm),
            ("ln2_bias", vec![d], Norm),
            ("mlp1_weight", vec![d, 2 * d], Weight),
            ("mlp1_bias", vec![2 * d], Bias),
            ("mlp2_weight", vec![2 * d, d], Weight),
            ("mlp2_bias", vec![d], Bias),
        ]
    }

    pub fn init(d: usize, heads: usize, rng: &mut RngStream) -> Result<Self> {
        Self::check_heads(d, heads)?;
        let mut layout = Self::layout(d).into_iter();
        Self::from_named(heads, |name| {
            let (n, shape, kind) = layout.next().expect("layout covers all fields");
            debug_assert_eq!(n, name);
            init_tensor(&shape, kind, shape[0], name.ends_with("gain"), rng)
        })
    }

    /// All-zero tensors of the right shapes.
    pub fn zeros(d: usize, heads: usize) -> Result<Self> {
        Self::check_heads(d, heads)?;
        let layout = Self::layout(d);
        Self::from_named(heads, |name| {
            let (_, shape, _) = layout.iter().find(|(n, ..)| *n == name).unwrap();
            Tensor::zeros(shape)
        })
    }

    fn check_heads(d: usize, heads: usize) -> Result<()> {
        if d == 0 || heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!(
                "embedding dimension {d} is not divisible by {heads} heads"
            )));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_q.shape().first().copied().unwrap_or(0);
        Self::check_heads(d, self.heads)?;
        for ((name, _, t), (_, shape, _)) in self.named().into_iter().zip(Self::layout(d)) {
            check_shape(name, t, &shape)?;
        }
        Ok(())
    }
}

impl FeatERBlockParams {
    /// `(name, shape, kind)` for an `[n, h, w]` stack, without allocating.
    pub fn layout(n: usize, h: usize, w: usize) -> Vec<(&'static str, Vec<usize>, ParamKind)> {
        use ParamKind::*;
        vec![
            ("ln1_gain", vec![n], Norm),
            ("ln1_bias", vec![n], Norm),
            ("w_q_w", vec![w, w], Weight),
            ("w_k_w", vec![w, w], Weight),
            ("w_v_w", vec![w, w], Weight),
            ("w_q_h", vec![h, h], Weight),
            ("w_k_h", vec![h, h], Weight),
            ("w_v_h", vec![h, h], Weight),
            ("proj_weight", vec![n, n], Weight),
            ("proj_bias", vec![n], Bias),
            ("ln2_gain", vec![n], Norm),
            ("ln2_bias", vec![n], Norm),
            ("ffn1_weight", vec![2 * n, n], Weight),
            ("ffn1_bias", vec![2 * n], Bias),
            ("ffn2_weight", vec![n, 2 * n], Weight),
            ("ffn2_bias", vec![n], Bias),
        ]
    }

    pub fn init(n: usize, h: usize, w: usize, heads: usize, rng: &mut RngStream) -> Result<Self> {
        Self::check_heads(h, w, heads)?;
        let mut layout = Self::layout(n, h, w).into_iter();
        Self::from_named(heads, |name| {
            let (_, shape, kind) = layout.next().expect("layout covers all fields");
            // conv weights are [out, in]; the w/h maps are square
            let fan_in = shape[shape.len() - 1];
            init_tensor(&shape, kind, fan_in, name.ends_with("gain"), rng)
        })
    }

    pub fn zeros(n: usize, h: usize, w: usize, heads: usize) -> Result<Self> {
        Self::check_heads(h, w, heads)?;
        let layout = Self::layout(n, h, w);
        Self::from_named(heads, |name| {
            let (_, shape, _) = layout.iter().find(|(l, ..)| *l == name).unwrap();
            Tensor::zeros(shape)
        })
    }

    fn check_heads(h: usize, w: usize, heads: usize) -> Result<()> {
        if heads == 0 || h % heads != 0 || w % heads != 0 {
            return Err(Error::dim(format!(
                "grid {h}×{w} is not divisible by {heads} heads"
            )));
        }
        Ok(())
    }

    /// `(n, h, w)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (
            self.proj_weight.shape()[0],
            self.w_q_h.shape()[0],
            self.w_q_w.shape()[0],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let first = |t: &Tensor| t.shape().first().copied().unwrap_or(0);
        let (n, h, w) = (first(&self.proj_weight), first(&self.w_q_h), first(&self.w_q_w));
        Self::check_heads(h, w, self.heads)?;
        for ((name, _, t), (_, shape, _)) in self.named().into_iter().zip(Self::layout(n, h, w)) {
            check_shape(name, t, &shape)?;
        }
        Ok(())
    }

    /// Parameters for the h↔w transposed problem: the width and height
    /// attention matrices trade places.
    pub fn transposed(&self) -> Self {
        let mut p = self.clone();
        std::mem::swap(&mut p.w_q_w, &mut p.w_q_h);
        std::mem::swap(&mut p.w_k_w, &mut p.w_k_h);
        std::mem::swap(&mut p.w_v_w, &mut p.w_v_h);
        p
    }
}
