//! Training objectives: next-item prediction (DAP), cross-modal contrastive
//! alignment (VCL / ICL / NICL), noised-item detection (NID) and
//! robustness-aware sequence contrast (RCL), and their weighted sum.

mod corruption;
mod layout;
mod losses;

pub use corruption::{corrupt_sequence, corruption_counts, Corruption, NoiseLabel};
pub use layout::{Batch, BatchLayout, NegativeSet};
pub use losses::{
    contrastive_loss, dap_loss, nid_loss, pooling_matrix, rcl_loss, ContrastiveVariant, Pooling, L2_EPS,
};

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Catalog;
use crate::diffcore::NodeId;
use crate::error::{Error, Result};
use crate::model::{Model, NID_GROUP};
use crate::params::Session;
use crate::rng::derive_seed_n;
use crate::scalar::Scalar;
use crate::user_encoder::encode_sequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dap: f64,
    pub contrastive: f64,
    pub nid: f64,
    pub rcl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dap: 1.0,
            contrastive: 1.0,
            nid: 1.0,
            rcl: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub dap: bool,
    pub contrastive: Option<ContrastiveVariant>,
    pub nid: bool,
    pub rcl: bool,
    pub weights: LossWeights,
    pub temperature: f64,
    pub shuffle_rate: f64,
    pub replace_rate: f64,
    pub pooling: Pooling,
}

impl ObjectiveConfig {
    /// DAP + NICL + NID + RCL with unit weights.
    pub fn pretrain() -> Self {
        Self {
            dap: true,
            contrastive: Some(ContrastiveVariant::Nicl),
            nid: true,
            rcl: true,
            weights: LossWeights::default(),
            temperature: 1.0,
            shuffle_rate: 0.15,
            replace_rate: 0.05,
            pooling: Pooling::Mean,
        }
    }

    /// DAP only.
    pub fn finetune() -> Self {
        Self {
            contrastive: None,
            nid: false,
            rcl: false,
            ..Self::pretrain()
        }
    }

    pub fn only_dap(&self) -> bool {
        self.dap && self.contrastive.is_none() && !self.nid && !self.rcl
    }

    pub fn needs_corruption(&self) -> bool {
        self.nid || self.rcl
    }
}

/// Component values of one evaluation; `None` for disabled objectives.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dap: Option<f64>,
    pub contrastive: Option<f64>,
    pub nid: Option<f64>,
    pub rcl: Option<f64>,
    pub total: f64,
}

pub struct LossOutput {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

/// Corrupts every sequence of the batch. Each user draws from a stream keyed
/// by (batch seed, user key) and replacements come from a canonically
/// ordered pool, so the result does not depend on user order.
pub fn corrupt_batch(batch: &Batch, shuffle_rate: f64, replace_rate: f64) -> Result<Vec<Corruption>> {
    let negs = NegativeSet::build(&batch.sequences);
    (0..batch.size())
        .map(|u| {
            let mut pool: Vec<usize> = negs
                .for_user(u)
                .iter()
                .map(|&(k, j)| batch.sequences[k][j])
                .collect();
            pool.sort_unstable();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_n(batch.seed, "corrupt", batch.users[u] as u64));
            corrupt_sequence(&batch.sequences[u], &pool, shuffle_rate, replace_rate, &mut rng)
        })
        .collect()
}

fn sequence_inputs<T: Scalar>(
    s: &mut Session<'_, T>,
    reps: NodeId,
    layout: &BatchLayout,
    occ: &[usize],
) -> Result<NodeId> {
    let d = s.g.shape(reps)[1];
    let x = s.g.gather(reps, occ)?;
    s.g.reshape(x, &[layout.b, layout.len, d])
}

/// Full pipeline on one batch: encode items, fuse, run the user encoder on
/// the original and (if needed) corrupted sequences, and combine the
/// enabled objectives with their weights.
pub fn total_loss<T: Scalar>(
    s: &mut Session<'_, T>,
    model: &Model<T>,
    batch: &Batch,
    catalog: &Catalog,
    cfg: &ObjectiveConfig,
) -> Result<LossOutput> {
    if !cfg.dap && cfg.contrastive.is_none() && !cfg.nid && !cfg.rcl {
        return Err(Error::invalid("every objective is disabled"));
    }
    let layout = BatchLayout::new(&batch.sequences)?;
    let items = layout
        .unique
        .iter()
        .map(|i| catalog.get(*i))
        .collect::<Result<Vec<_>>>()?;
    let enc = model.encode_items(s, &items)?;
    let ucfg = &model.config.user;

    let x = sequence_inputs(s, enc.reps, &layout, &layout.occ)?;
    let hiddens = encode_sequence(s, ucfg, x, &layout.mask)?;

    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    let mut out = LossBreakdown::default();
    let value = |s: &Session<'_, T>, id: NodeId| s.g.value(id).item().map(|v| v.f64()).unwrap_or(f64::NAN);

    if cfg.dap {
        let l = dap_loss(&mut s.g, hiddens, enc.reps, &layout, cfg.temperature)?;
        out.dap = Some(value(s, l));
        terms.push((l, cfg.weights.dap));
    }
    if let Some(variant) = cfg.contrastive {
        let (Some(t), Some(v)) = (enc.t_cls, enc.v_cls) else {
            return Err(Error::invalid("contrastive objectives need both text and vision encoders"));
        };
        let l = contrastive_loss(&mut s.g, variant, t, v, &layout, cfg.temperature)?;
        out.contrastive = Some(value(s, l));
        terms.push((l, cfg.weights.contrastive));
    }
    if cfg.needs_corruption() {
        let corr = corrupt_batch(batch, cfg.shuffle_rate, cfg.replace_rate)?;
        let mut occ = vec![0; layout.b * layout.len];
        let mut labels = vec![NoiseLabel::Padding; layout.b * layout.len];
        for (u, c) in corr.iter().enumerate() {
            for (l, item) in c.items.iter().enumerate() {
                occ[u * layout.len + l] = layout
                    .column(*item)
                    .ok_or(Error::UnknownItem(*item))?;
                labels[u * layout.len + l] = c.labels[l];
            }
        }
        let xc = sequence_inputs(s, enc.reps, &layout, &occ)?;
        let corrupted = encode_sequence(s, ucfg, xc, &layout.mask)?;
        if cfg.nid {
            let w = s.p(&format!("{NID_GROUP}.w"))?;
            let b = s.p(&format!("{NID_GROUP}.b"))?;
            let l = nid_loss(&mut s.g, corrupted, &labels, &layout.mask, w, b)?;
            out.nid = Some(value(s, l));
            terms.push((l, cfg.weights.nid));
        }
        if cfg.rcl {
            let l = rcl_loss(&mut s.g, hiddens, corrupted, &layout.mask, cfg.pooling, cfg.temperature)?;
            out.rcl = Some(value(s, l));
            terms.push((l, cfg.weights.rcl));
        }
    }

    let mut total: Option<NodeId> = None;
    for (node, w) in terms {
        let t = if w == 1.0 { node } else { s.g.scale(node, T::of(w)) };
        total = Some(match total {
            None => t,
            Some(acc) => s.g.add(acc, t)?,
        });
    }
    let total = total.expect("at least one objective");
    out.total = value(s, total);
    Ok(LossOutput {
        total,
        breakdown: out,
    })
}

/// Distinct catalog indices touched by a batch, including corruption draws.
pub fn batch_items(batch: &Batch) -> BTreeSet<usize> {
    batch.sequences.iter().flatten().copied().collect()
}

#[cfg(test)]
pub(crate) mod tests;
