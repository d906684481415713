//! Token-mixing blocks over `[B, N, d]` sequences: standard multi-head
//! self-attention and broadcast self-attention.
//!
//! Broadcast self-attention scores each token with one scalar, normalizes
//! the scores over the token axis, pools the keys into a single context
//! vector, and modulates every token's value by that context elementwise:
//!
//! ```text
//! s = X w_s                 [B, N, 1]
//! a = softmax_N(s)          [B, N, 1]
//! c = Σ_n a_n (X W_k + b_k)_n   [B, 1, d]
//! y = ((X W_v + b_v) ⊙ c) W_o + b_o
//! ```
//!
//! No intermediate has more than `B·N·d` elements.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

/// Per-element flop cost charged to softmax.
pub const SOFTMAX_FLOPS_PER_ELEMENT: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttnKind {
    Mhsa,
    Bsa,
}

impl fmt::Display for AttnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnKind::Mhsa => "mhsa",
            AttnKind::Bsa => "bsa",
        })
    }
}

impl FromStr for AttnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mhsa" => Ok(AttnKind::Mhsa),
            "bsa" => Ok(AttnKind::Bsa),
            other => Err(Error::Config(format!("unknown attention kind `{other}` (expected mhsa or bsa)"))),
        }
    }
}

fn check_tokens(op: &'static str, tape: &Tape, x: Var, d: usize) -> Result<(usize, usize)> {
    let s = tape.try_value(x)?.shape();
    if s.len() != 3 || s[2] != d {
        return Err(Error::dim(op, format!("expected [B, N, {d}], got {s:?}")));
    }
    Ok((s[0], s[1]))
}

#[derive(Debug, Clone, Copy)]
struct Projection {
    weight: ParamId,
    bias: ParamId,
}

impl Projection {
    fn new(store: &mut ParamStore, name: String, d: usize) -> Self {
        Projection {
            weight: store.fan_in(format!("{name}.weight"), &[d, d], d),
            bias: store.fan_in(format!("{name}.bias"), &[d], d),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.weight], Some(p[self.bias]))
    }
}

/// Scaled dot-product attention with `heads` heads.
#[derive(Debug, Clone)]
pub struct MhsaBlock {
    pub model_dim: usize,
    pub heads: usize,
    query: Projection,
    key: Projection,
    value: Projection,
    output: Projection,
}

impl MhsaBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, model_dim: usize, heads: usize) -> Result<Self> {
        if model_dim == 0 || heads == 0 || !model_dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("model_dim {model_dim} must be a positive multiple of heads {heads}")));
        }
        Ok(MhsaBlock {
            model_dim,
            heads,
            query: Projection::new(store, format!("{prefix}.query"), model_dim),
            key: Projection::new(store, format!("{prefix}.key"), model_dim),
            value: Projection::new(store, format!("{prefix}.value"), model_dim),
            output: Projection::new(store, format!("{prefix}.output"), model_dim),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.query, self.key, self.value, self.output].iter().flat_map(|p| [p.weight, p.bias]).collect()
    }

    /// `4·d² + 4·d`.
    pub fn param_count(model_dim: usize) -> usize {
        4 * model_dim * model_dim + 4 * model_dim
    }

    fn split_heads(&self, tape: &mut Tape, t: Var, b: usize, n: usize) -> Result<Var> {
        let (h, dh) = (self.heads, self.model_dim / self.heads);
        let t = tape.reshape(t, &[b, n, h, dh])?;
        let t = tape.permute(t, &[0, 2, 1, 3])?;
        tape.reshape(t, &[b * h, n, dh])
    }

    /// Softmax attention weights `[B·h, N, N]`.
    pub fn attention_weights(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, usize, usize)> {
        let (b, n) = check_tokens("mhsa_forward", tape, x, self.model_dim)?;
        let q = self.query.apply(tape, p, x)?;
        let k = self.key.apply(tape, p, x)?;
        let q = self.split_heads(tape, q, b, n)?;
        let k = self.split_heads(tape, k, b, n)?;
        let scores = tape.bmm(q, k, true)?;
        let dh = (self.model_dim / self.heads) as f64;
        let scores = tape.scale(scores, 1.0 / dh.sqrt())?;
        Ok((tape.softmax(scores, 2)?, b, n))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (attn, b, n) = self.attention_weights(tape, p, x)?;
        let v = self.value.apply(tape, p, x)?;
        let v = self.split_heads(tape, v, b, n)?;
        let ctx = tape.bmm(attn, v, false)?;
        let ctx = tape.reshape(ctx, &[b, self.heads, n, self.model_dim / self.heads])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, n, self.model_dim])?;
        self.output.apply(tape, p, ctx)
    }
}

/// Single-head broadcast self-attention.
#[derive(Debug, Clone)]
pub struct BsaBlock {
    pub model_dim: usize,
    score: ParamId,
    key: Projection,
    value: Projection,
    output: Projection,
}

impl BsaBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, model_dim: usize) -> Result<Self> {
        if model_dim == 0 {
            return Err(Error::Config("model_dim must be positive".into()));
        }
        Ok(BsaBlock {
            model_dim,
            score: store.fan_in(format!("{prefix}.score"), &[model_dim], model_dim),
            key: Projection::new(store, format!("{prefix}.key"), model_dim),
            value: Projection::new(store, format!("{prefix}.value"), model_dim),
            output: Projection::new(store, format!("{prefix}.output"), model_dim),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.score)
            .chain([self.key, self.value, self.output].iter().flat_map(|p| [p.weight, p.bias]))
            .collect()
    }

    /// `d + 3·d² + 3·d`.
    pub fn param_count(model_dim: usize) -> usize {
        model_dim + 3 * model_dim * model_dim + 3 * model_dim
    }

    /// Token weights `a = softmax_N(X w_s)` with shape `[B, N, 1]`.
    pub fn attention_weights(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        check_tokens("bsa_forward", tape, x, self.model_dim)?;
        let w = tape.reshape(p[self.score], &[1, self.model_dim])?;
        let s = tape.linear(x, w, None)?;
        tape.softmax(s, 1)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let a = self.attention_weights(tape, p, x)?;
        let k = self.key.apply(tape, p, x)?;
        let weighted = tape.mul(a, k)?;
        let context = tape.sum_axis(weighted, 1)?;
        let v = self.value.apply(tape, p, x)?;
        let mixed = tape.mul(v, context)?;
        self.output.apply(tape, p, mixed)
    }
}

/// Closed-form flops of one attention block on `n` tokens of width `d`
/// (1 multiply-add = 2 flops, softmax = 5 flops per element).
///
/// MHSA: `2·4·N·d² + 2·2·N²·d + h·N²·5`.
/// BSA: `2·3·N·d² + 2·N·d + 5·N + 2·N·d + N·d`.
pub fn attention_flops(kind: AttnKind, n: u64, d: u64, h: u64) -> u64 {
    let sm = SOFTMAX_FLOPS_PER_ELEMENT;
    match kind {
        AttnKind::Mhsa => 2 * (4 * n * d * d) + 2 * (2 * n * n * d) + h * n * n * sm,
        AttnKind::Bsa => 2 * (3 * n * d * d) + 2 * n * d + n * sm + 2 * n * d + n * d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn parameter_counts() {
        for d in [1, 2, 8, 64] {
            let mut s = ParamStore::new(0);
            let m = MhsaBlock::new(&mut s, "m", d, 1).unwrap();
            assert_eq!(s.numel_of(&m.param_ids()), MhsaBlock::param_count(d));
            let mut s = ParamStore::new(0);
            let b = BsaBlock::new(&mut s, "b", d).unwrap();
            assert_eq!(s.numel_of(&b.param_ids()), BsaBlock::param_count(d));
            assert!(BsaBlock::param_count(d) < MhsaBlock::param_count(d));
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut s = ParamStore::new(0);
        assert!(matches!(MhsaBlock::new(&mut s, "m", 6, 4), Err(Error::Config(_))));
    }

    #[test]
    fn flops_hand_values() {
        // 2*4*1*4 + 2*2*1*2 + 1*1*5
        assert_eq!(attention_flops(AttnKind::Mhsa, 1, 2, 1), 45);
        // 2*3*1*4 + 2*2 + 5 + 2*2 + 2
        assert_eq!(attention_flops(AttnKind::Bsa, 1, 2, 1), 39);
        let r = attention_flops(AttnKind::Bsa, 128, 32, 1) as f64 / attention_flops(AttnKind::Bsa, 64, 32, 1) as f64;
        assert!((1.9..=2.1).contains(&r));
        let r = attention_flops(AttnKind::Mhsa, 128, 32, 4) as f64 / attention_flops(AttnKind::Mhsa, 64, 32, 4) as f64;
        assert!(r > 2.5, "{r}");
    }

    #[test]
    fn single_token_bsa() {
        let d = 4;
        let mut store = ParamStore::new(3);
        let block = BsaBlock::new(&mut store, "b", d).unwrap();
        let xs = vec![0.3, -1.2, 0.8, 0.1];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(&[1, 1, d], xs.clone()).unwrap());
        let a = block.attention_weights(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0]);
        let y = block.forward(&mut tape, &p, x).unwrap();
        let lin = |w: ParamId, b: ParamId, v: &[f64]| -> Vec<f64> {
            let (w, b) = (store.get(w).data(), store.get(b).data());
            (0..d).map(|o| b[o] + (0..d).map(|i| w[o * d + i] * v[i]).sum::<f64>()).collect()
        };
        let k = lin(block.key.weight, block.key.bias, &xs);
        let v = lin(block.value.weight, block.value.bias, &xs);
        let vk: Vec<f64> = v.iter().zip(&k).map(|(a, b)| a * b).collect();
        let want = lin(block.output.weight, block.output.bias, &vk);
        for (g, w) in tape.value(y).data().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let d = 6;
        let mut store = ParamStore::new(5);
        let bsa = BsaBlock::new(&mut store, "b", d).unwrap();
        let mhsa = MhsaBlock::new(&mut store, "m", d, 2).unwrap();
        let row = [0.5, -0.25, 1.0, 0.0, 2.0, -1.5];
        let x = Tensor::new(&[1, 2, d], row.iter().chain(&row).copied().collect()).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let a = bsa.attention_weights(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.value(a).data(), &[0.5, 0.5]);
        for y in [bsa.forward(&mut tape, &p, xv).unwrap(), mhsa.forward(&mut tape, &p, xv).unwrap()] {
            let out = tape.value(y).data();
            assert_eq!(&out[..d], &out[d..]);
        }
    }

    #[test]
    fn single_token_mhsa_is_value_then_output() {
        let d = 4;
        let mut store = ParamStore::new(9);
        let block = MhsaBlock::new(&mut store, "m", d, 2).unwrap();
        let xs = vec![1.0, 0.5, -0.5, 2.0];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(&[1, 1, d], xs.clone()).unwrap());
        let y = block.forward(&mut tape, &p, x).unwrap();
        let lin = |w: ParamId, b: ParamId, v: &[f64]| -> Vec<f64> {
            let (w, b) = (store.get(w).data(), store.get(b).data());
            (0..d).map(|o| b[o] + (0..d).map(|i| w[o * d + i] * v[i]).sum::<f64>()).collect()
        };
        let want = lin(block.output.weight, block.output.bias, &lin(block.value.weight, block.value.bias, &xs));
        for (g, w) in tape.value(y).data().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn bsa_never_builds_token_by_token_arrays() {
        let (b, n, d) = (1, 64, 8);
        let mut store = ParamStore::new(1);
        let block = BsaBlock::new(&mut store, "b", d).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let x = tape.constant(Tensor::zeros(&[b, n, d]));
        let start = tape.len();
        block.forward(&mut tape, &p, x).unwrap();
        let biggest = tape.node_shapes().skip(start).map(|(_, s)| s.iter().product::<usize>()).max().unwrap();
        assert!(biggest <= b * n * d, "{biggest}");

        let mut store = ParamStore::new(1);
        let mhsa = MhsaBlock::new(&mut store, "m", d, 1).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let x = tape.constant(Tensor::zeros(&[b, n, d]));
        let start = tape.len();
        mhsa.forward(&mut tape, &p, x).unwrap();
        assert!(tape.node_shapes().skip(start).any(|(_, s)| s.iter().product::<usize>() >= n * n));
    }
}
