//! Transformer building blocks shared by the item and user encoders.

use rand::Rng;

use crate::diffcore::NodeId;
use crate::error::Result;
use crate::params::{Init, ParamSet, Session};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;
pub const FFN_MULT: usize = 4;

pub(crate) fn init_linear<T: Scalar>(
    ps: &mut ParamSet<T>,
    init: &mut Init<'_>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) {
    ps.insert(format!("{prefix}.w"), init.normal(&[d_in, d_out]));
    ps.insert(format!("{prefix}.b"), init.zeros(&[d_out]));
}

pub(crate) fn init_layer_norm<T: Scalar>(ps: &mut ParamSet<T>, init: &mut Init<'_>, prefix: &str, d: usize) {
    ps.insert(format!("{prefix}.g"), init.ones(&[d]));
    ps.insert(format!("{prefix}.b"), init.zeros(&[d]));
}

pub(crate) fn init_block<T: Scalar>(ps: &mut ParamSet<T>, init: &mut Init<'_>, prefix: &str, d: usize) {
    init_layer_norm(ps, init, &format!("{prefix}.ln1"), d);
    for m in ["q", "k", "v", "o"] {
        init_linear(ps, init, &format!("{prefix}.attn.{m}"), d, d);
    }
    init_layer_norm(ps, init, &format!("{prefix}.ln2"), d);
    init_linear(ps, init, &format!("{prefix}.ffn1"), d, FFN_MULT * d);
    init_linear(ps, init, &format!("{prefix}.ffn2"), FFN_MULT * d, d);
}

pub(crate) fn linear<T: Scalar>(s: &mut Session<'_, T>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let w = s.p(&format!("{prefix}.w"))?;
    let b = s.p(&format!("{prefix}.b"))?;
    let h = s.g.matmul(x, w)?;
    s.g.add_bcast(h, b)
}

pub(crate) fn layer_norm<T: Scalar>(s: &mut Session<'_, T>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let g = s.p(&format!("{prefix}.g"))?;
    let b = s.p(&format!("{prefix}.b"))?;
    s.g.layer_norm(x, g, b, T::of(LN_EPS))
}

/// Attention mask for `n` sequences: `mask[(i*sq + a)*sk + b]` says whether
/// query `a` of sequence `i` may attend to key `b`.
pub fn key_padding_mask(key_mask: &[bool], n: usize, sq: usize, sk: usize, causal: bool) -> Vec<bool> {
    debug_assert_eq!(key_mask.len(), n * sk);
    let mut out = Vec::with_capacity(n * sq * sk);
    for i in 0..n {
        for a in 0..sq {
            for b in 0..sk {
                out.push(key_mask[i * sk + b] && (!causal || b <= a));
            }
        }
    }
    out
}

/// Multi-head attention from `q_in [n, sq, d]` onto `kv_in [n, sk, d]`.
pub(crate) fn attention<T: Scalar>(
    s: &mut Session<'_, T>,
    prefix: &str,
    q_in: NodeId,
    kv_in: NodeId,
    n_heads: usize,
    mask: &[bool],
) -> Result<NodeId> {
    let qs = s.g.shape(q_in).to_vec();
    let ks = s.g.shape(kv_in).to_vec();
    let (n, sq, d) = (qs[0], qs[1], qs[2]);
    let sk = ks[1];
    let dh = d / n_heads;

    let q = linear(s, q_in, &format!("{prefix}.q"))?;
    let k = linear(s, kv_in, &format!("{prefix}.k"))?;
    let v = linear(s, kv_in, &format!("{prefix}.v"))?;
    let split = |s: &mut Session<'_, T>, x: NodeId, len: usize| -> Result<NodeId> {
        let x = s.g.reshape(x, &[n, len, n_heads, dh])?;
        let x = s.g.permute(x, &[0, 2, 1, 3])?;
        s.g.reshape(x, &[n * n_heads, len, dh])
    };
    let q = split(s, q, sq)?;
    let k = split(s, k, sk)?;
    let v = split(s, v, sk)?;

    let scores = s.g.bmm_t(q, k)?;
    let scores = s.g.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
    let block = sq * sk;
    let mut head_mask = Vec::with_capacity(n * n_heads * block);
    for i in 0..n {
        for _ in 0..n_heads {
            head_mask.extend_from_slice(&mask[i * block..(i + 1) * block]);
        }
    }
    let att = s.g.masked_softmax(scores, &head_mask)?;
    let ctx = s.g.bmm(att, v)?;
    let ctx = s.g.reshape(ctx, &[n, n_heads, sq, dh])?;
    let ctx = s.g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = s.g.reshape(ctx, &[n, sq, d])?;
    linear(s, ctx, &format!("{prefix}.o"))
}

fn dropout<T: Scalar>(s: &mut Session<'_, T>, x: NodeId, rate: f64) -> Result<NodeId> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let Some(rng) = s.dropout_rng.as_mut() else {
        return Ok(x);
    };
    let n = s.g.value(x).len();
    let keep = T::of(1.0 / (1.0 - rate));
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    s.g.mul_const(x, mask)
}

/// Pre-norm transformer block. When `query_positions` is set, only those
/// positions (indices into the sequence axis) are computed as outputs while
/// keys and values still cover the whole sequence.
pub(crate) fn block<T: Scalar>(
    s: &mut Session<'_, T>,
    prefix: &str,
    x: NodeId,
    n_heads: usize,
    mask: &[bool],
    query_positions: Option<&[usize]>,
    dropout_rate: f64,
) -> Result<NodeId> {
    let shape = s.g.shape(x).to_vec();
    let (n, len, d) = (shape[0], shape[1], shape[2]);
    let h = layer_norm(s, x, &format!("{prefix}.ln1"))?;
    let (x_q, h_q) = match query_positions {
        None => (x, h),
        Some(pos) => {
            let rows: Vec<usize> = (0..n).flat_map(|i| pos.iter().map(move |p| i * len + p)).collect();
            let xf = s.g.reshape(x, &[n * len, d])?;
            let hf = s.g.reshape(h, &[n * len, d])?;
            let xq = s.g.gather(xf, &rows)?;
            let hq = s.g.gather(hf, &rows)?;
            (
                s.g.reshape(xq, &[n, pos.len(), d])?,
                s.g.reshape(hq, &[n, pos.len(), d])?,
            )
        }
    };
    let a = attention(s, &format!("{prefix}.attn"), h_q, h, n_heads, mask)?;
    let a = dropout(s, a, dropout_rate)?;
    let r = s.g.add(x_q, a)?;
    let h2 = layer_norm(s, r, &format!("{prefix}.ln2"))?;
    let f = linear(s, h2, &format!("{prefix}.ffn1"))?;
    let f = s.g.gelu(f);
    let f = linear(s, f, &format!("{prefix}.ffn2"))?;
    let f = dropout(s, f, dropout_rate)?;
    s.g.add(r, f)
}
