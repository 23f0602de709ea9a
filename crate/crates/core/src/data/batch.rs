use rand::seq::SliceRandom;

use super::SplitDataset;
use crate::error::{Error, Result};
use crate::objectives::Batch;
use crate::rng::{derive_seed_n, rng_for};

/// Shuffles users by `seed`, keeps the most recent `l_max` training items of
/// each, and groups them into batches of at most `b`. Users with fewer than
/// two training items have no transition and are skipped. Batch user keys
/// are indices into `split.users`.
pub fn make_batches(split: &SplitDataset, b: usize, l_max: usize, seed: u64) -> Result<Vec<Batch>> {
    if b == 0 || l_max < 2 {
        return Err(Error::invalid(format!("batch size {} / length {} too small", b, l_max)));
    }
    if split.is_empty() {
        return Err(Error::invalid("cannot batch an empty split"));
    }
    let mut order: Vec<usize> = (0..split.users.len())
        .filter(|&u| split.users[u].train.len() >= 2)
        .collect();
    order.shuffle(&mut rng_for(seed, "batch-order"));
    order
        .chunks(b)
        .enumerate()
        .map(|(k, chunk)| {
            let seqs = chunk
                .iter()
                .map(|&u| {
                    let t = &split.users[u].train;
                    t[t.len().saturating_sub(l_max)..].to_vec()
                })
                .collect();
            Batch::new(chunk.to_vec(), seqs, derive_seed_n(seed, "batch", k as u64))
        })
        .collect()
}
