use serde::{Deserialize, Serialize};

use super::corruption::NoiseLabel;
use super::layout::BatchLayout;
use crate::diffcore::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// ℓ2 guard used before cross-modal similarities.
pub const L2_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContrastiveVariant {
    /// text↔vision of the same item against cross-modal negatives
    Vcl,
    /// VCL plus same-modality negatives
    Icl,
    /// ICL plus the next item's text and vision as extra positives
    Nicl,
}

impl std::str::FromStr for ContrastiveVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vcl" => Ok(Self::Vcl),
            "icl" => Ok(Self::Icl),
            "nicl" => Ok(Self::Nicl),
            other => Err(Error::invalid(format!("unknown contrastive variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    Mean,
    Last,
}

/// `mean_r [ lse_w_den(x_r) − lse_w_num(x_r) ]`: the negative log of a ratio
/// of weighted exponential sums, row by row.
fn ratio_loss<T: Scalar>(g: &mut Graph<T>, x: NodeId, num: Vec<T>, den: Vec<T>) -> Result<NodeId> {
    let ld = g.weighted_lse(x, den)?;
    let ln = g.weighted_lse(x, num)?;
    let diff = g.sub(ld, ln)?;
    g.mean(diff)
}

fn scaled<T: Scalar>(g: &mut Graph<T>, x: NodeId, temperature: f64) -> NodeId {
    if temperature == 1.0 {
        x
    } else {
        g.scale(x, T::of(1.0 / temperature))
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature {} must be positive", t)))
    }
}

/// Next-item cross-entropy at every transition against in-batch negatives.
///
/// `hiddens` is `[b, len, d]` from the user encoder on the original
/// sequences, `item_reps` is `[n_unique, d]` in layout column order.
pub fn dap_loss<T: Scalar>(
    g: &mut Graph<T>,
    hiddens: NodeId,
    item_reps: NodeId,
    layout: &BatchLayout,
    temperature: f64,
) -> Result<NodeId> {
    check_temperature(temperature)?;
    let trans = layout.transitions();
    if trans.is_empty() {
        return Err(Error::invalid("DAP needs at least one transition"));
    }
    let d = *g.shape(hiddens).last().unwrap();
    let n = layout.n_unique();
    let flat = g.reshape(hiddens, &[layout.b * layout.len, d])?;
    let rows: Vec<usize> = trans.iter().map(|(u, l)| u * layout.len + l).collect();
    let h = g.gather(flat, &rows)?;
    let scores = g.matmul_t(h, item_reps)?;
    let scores = scaled(g, scores, temperature);
    let mut num = vec![T::zero(); trans.len() * n];
    let mut den = vec![T::zero(); trans.len() * n];
    for (r, &(u, l)) in trans.iter().enumerate() {
        let next = layout.col_at(u, l + 1);
        num[r * n + next] = T::one();
        for (c, w) in layout.neg_weights[u].iter().enumerate() {
            den[r * n + c] = T::of(*w as f64);
        }
        den[r * n + next] = den[r * n + next] + T::one();
    }
    ratio_loss(g, scores, num, den)
}

/// Cross-modal contrastive loss over `[n_unique, d]` text and vision cls
/// vectors (normalized here). The text→vision and vision→text directions
/// are averaged. NICL anchors are transitions; VCL and ICL anchors are all
/// real positions.
pub fn contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    variant: ContrastiveVariant,
    t_cls: NodeId,
    v_cls: NodeId,
    layout: &BatchLayout,
    temperature: f64,
) -> Result<NodeId> {
    check_temperature(temperature)?;
    let anchors = match variant {
        ContrastiveVariant::Nicl => layout.transitions(),
        _ => layout.positions(),
    };
    if anchors.is_empty() {
        return Err(Error::invalid("NICL needs sequences of length >= 2"));
    }
    let n = layout.n_unique();
    let tn = g.l2_normalize(t_cls, T::of(L2_EPS));
    let vn = g.l2_normalize(v_cls, T::of(L2_EPS));
    let s_tv = g.matmul_t(tn, vn)?;
    let s_tt = g.matmul_t(tn, tn)?;
    let s_vt = g.matmul_t(vn, tn)?;
    let s_vv = g.matmul_t(vn, vn)?;
    // anchor's own modality in the last n columns, the other modality first
    let x_t = g.concat(&[s_tv, s_tt], 1)?;
    let x_v = g.concat(&[s_vt, s_vv], 1)?;

    let cols = 2 * n;
    let mut num = vec![T::zero(); anchors.len() * cols];
    let mut den = vec![T::zero(); anchors.len() * cols];
    let one = T::one();
    for (r, &(u, l)) in anchors.iter().enumerate() {
        let base = r * cols;
        let a = layout.col_at(u, l);
        num[base + a] = num[base + a] + one;
        den[base + a] = den[base + a] + one;
        if variant == ContrastiveVariant::Nicl {
            let nx = layout.col_at(u, l + 1);
            num[base + nx] = num[base + nx] + one;
            num[base + n + nx] = num[base + n + nx] + one;
        }
        for (c, w) in layout.neg_weights[u].iter().enumerate() {
            let w = T::of(*w as f64);
            den[base + c] = den[base + c] + w;
            if variant != ContrastiveVariant::Vcl {
                den[base + n + c] = den[base + n + c] + w;
            }
        }
    }
    let anchor_cols: Vec<usize> = anchors.iter().map(|(u, l)| layout.col_at(*u, *l)).collect();
    let rows_t = g.gather(x_t, &anchor_cols)?;
    let rows_v = g.gather(x_v, &anchor_cols)?;
    let rows_t = scaled(g, rows_t, temperature);
    let rows_v = scaled(g, rows_v, temperature);
    let l_tv = ratio_loss(g, rows_t, num.clone(), den.clone())?;
    let l_vt = ratio_loss(g, rows_v, num, den)?;
    let sum = g.add(l_tv, l_vt)?;
    Ok(g.scale(sum, T::of(0.5)))
}

/// Three-way noise classification: class scores `ReLU(h̃W + b)`, softmax,
/// cross-entropy against the label, averaged over real positions.
pub fn nid_loss<T: Scalar>(
    g: &mut Graph<T>,
    corrupted_hiddens: NodeId,
    labels: &[NoiseLabel],
    mask: &[bool],
    w: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let shape = g.shape(corrupted_hiddens).to_vec();
    let d = *shape.last().unwrap();
    let total: usize = shape[..shape.len() - 1].iter().product();
    if labels.len() != total || mask.len() != total {
        return Err(Error::invalid(format!(
            "{} labels / {} mask entries for {} positions",
            labels.len(),
            mask.len(),
            total
        )));
    }
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for (p, (&m, &lab)) in mask.iter().zip(labels).enumerate() {
        if !m {
            continue;
        }
        let c = lab
            .class()
            .ok_or_else(|| Error::invalid(format!("padding label at real position {}", p)))?;
        rows.push(p);
        classes.push(c);
    }
    if rows.is_empty() {
        return Err(Error::invalid("NID needs at least one real position"));
    }
    let flat = g.reshape(corrupted_hiddens, &[total, d])?;
    let h = g.gather(flat, &rows)?;
    let z = g.matmul(h, w)?;
    let z = g.add_bcast(z, b)?;
    let z = g.relu(z);
    let k = g.shape(z)[1];
    let mut num = vec![T::zero(); rows.len() * k];
    for (r, c) in classes.iter().enumerate() {
        num[r * k + c] = T::one();
    }
    let den = vec![T::one(); rows.len() * k];
    ratio_loss(g, z, num, den)
}

/// Pooling matrix `[b, b*len]` over real positions.
pub fn pooling_matrix<T: Scalar>(mask: &[bool], b: usize, len: usize, pooling: Pooling) -> Vec<T> {
    let mut p = vec![T::zero(); b * b * len];
    for u in 0..b {
        let real = mask[u * len..(u + 1) * len].iter().filter(|m| **m).count();
        match pooling {
            Pooling::Mean => {
                for l in 0..real {
                    p[u * b * len + u * len + l] = T::of(1.0 / real as f64);
                }
            }
            Pooling::Last => {
                if real > 0 {
                    p[u * b * len + u * len + real - 1] = T::one();
                }
            }
        }
    }
    p
}

/// Each user's pooled original sequence against its pooled corrupted twin,
/// with the other users' corrupted sequences as negatives.
pub fn rcl_loss<T: Scalar>(
    g: &mut Graph<T>,
    original: NodeId,
    corrupted: NodeId,
    mask: &[bool],
    pooling: Pooling,
    temperature: f64,
) -> Result<NodeId> {
    check_temperature(temperature)?;
    let shape = g.shape(original).to_vec();
    if shape.len() != 3 || g.shape(corrupted) != shape.as_slice() {
        return Err(Error::invalid(format!(
            "RCL inputs {:?} / {:?} must both be [b, len, d]",
            shape,
            g.shape(corrupted)
        )));
    }
    let (b, len, d) = (shape[0], shape[1], shape[2]);
    if b < 1 || mask.len() != b * len {
        return Err(Error::invalid("RCL needs B >= 1 and a mask per position"));
    }
    let pm = g.constant(crate::diffcore::Tensor::new(
        vec![b, b * len],
        pooling_matrix(mask, b, len, pooling),
    )?);
    let fo = g.reshape(original, &[b * len, d])?;
    let fc = g.reshape(corrupted, &[b * len, d])?;
    let ho = g.matmul(pm, fo)?;
    let hc = g.matmul(pm, fc)?;
    let s = g.matmul_t(ho, hc)?;
    let s = scaled(g, s, temperature);
    let mut num = vec![T::zero(); b * b];
    for u in 0..b {
        num[u * b + u] = T::one();
    }
    ratio_loss(g, s, num, vec![T::one(); b * b])
}
