//! Causal transformer over a user's sequence of item vectors.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::NodeId;
use crate::error::{Error, Result};
use crate::layers::{block, init_block, init_layer_norm, key_padding_mask, layer_norm};
use crate::params::{Init, ParamSet, Session};
use crate::scalar::Scalar;

pub const USER_GROUP: &str = "user_encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserEncoderConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub l_max: usize,
    /// Applied only in sessions that carry a dropout stream.
    pub dropout: f64,
}

impl Default for UserEncoderConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            n_heads: 4,
            l_max: 20,
            dropout: 0.0,
        }
    }
}

impl UserEncoderConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_blocks == 0 || self.n_heads == 0 || d % self.n_heads != 0 || self.l_max < 2 {
            return Err(Error::invalid(format!(
                "user encoder needs n_blocks >= 1, l_max >= 2 and n_heads dividing d={} (n_heads={})",
                d, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

pub(crate) fn init_user_encoder<T: Scalar>(
    ps: &mut ParamSet<T>,
    cfg: &UserEncoderConfig,
    d: usize,
    rng: &mut ChaCha8Rng,
) {
    let mut init = Init { rng };
    ps.insert(format!("{USER_GROUP}.pos_emb"), init.normal(&[cfg.l_max, d]));
    for b in 0..cfg.n_blocks {
        init_block(ps, &mut init, &format!("{USER_GROUP}.block{b}"), d);
    }
    init_layer_norm(ps, &mut init, &format!("{USER_GROUP}.ln_f"), d);
}

/// Real items must form a non-empty prefix of each row.
pub fn check_right_padded(seq_mask: &[bool], batch: usize, len: usize) -> Result<()> {
    for u in 0..batch {
        let row = &seq_mask[u * len..(u + 1) * len];
        let real = row.iter().take_while(|m| **m).count();
        if real == 0 || row[real..].iter().any(|m| *m) {
            return Err(Error::invalid(format!("sequence {} is not a right-padded prefix", u)));
        }
    }
    Ok(())
}

/// `item_reps [b, len, d]` plus learned positions through causally masked
/// blocks; returns `[b, len, d]` where row `l` sees only items `0..=l`.
pub fn encode_sequence<T: Scalar>(
    s: &mut Session<'_, T>,
    cfg: &UserEncoderConfig,
    item_reps: NodeId,
    seq_mask: &[bool],
) -> Result<NodeId> {
    let shape = s.g.shape(item_reps).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(format!("item reps must be [b, len, d], got {:?}", shape)));
    }
    let (b, len, d) = (shape[0], shape[1], shape[2]);
    let pos = s.p(&format!("{USER_GROUP}.pos_emb"))?;
    let pd = s.g.shape(pos)[1];
    if d != pd {
        return Err(Error::invalid(format!("item reps have d={} but user encoder d={}", d, pd)));
    }
    if len > cfg.l_max || seq_mask.len() != b * len {
        return Err(Error::invalid(format!(
            "sequence length {} (mask {}) exceeds l_max {} or mismatches",
            len,
            seq_mask.len(),
            cfg.l_max
        )));
    }
    check_right_padded(seq_mask, b, len)?;
    let pos_rows: Vec<usize> = (0..len).collect();
    let pos = s.g.gather(pos, &pos_rows)?;
    let mut x = s.g.add_bcast(item_reps, pos)?;
    let mask = key_padding_mask(seq_mask, b, len, len, true);
    for blk in 0..cfg.n_blocks {
        x = block(s, &format!("{USER_GROUP}.block{blk}"), x, cfg.n_heads, &mask, None, cfg.dropout)?;
    }
    layer_norm(s, x, &format!("{USER_GROUP}.ln_f"))
}
