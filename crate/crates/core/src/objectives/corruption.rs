use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Per-position NID class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseLabel {
    Unchanged = 0,
    Shuffled = 1,
    Replaced = 2,
    /// Padded position; never scored.
    Padding = 3,
}

impl NoiseLabel {
    pub fn class(self) -> Option<usize> {
        match self {
            NoiseLabel::Padding => None,
            l => Some(l as usize),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corruption {
    pub items: Vec<usize>,
    pub labels: Vec<NoiseLabel>,
}

impl Corruption {
    /// (unchanged, shuffled, replaced) counts.
    pub fn histogram(&self) -> (usize, usize, usize) {
        let c = |l| self.labels.iter().filter(|x| **x == l).count();
        (
            c(NoiseLabel::Unchanged),
            c(NoiseLabel::Shuffled),
            c(NoiseLabel::Replaced),
        )
    }
}

fn rate_count(rate: f64, len: usize) -> usize {
    // guard against 0.15 * 20 landing a hair above 3
    (rate * len as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Target (shuffle, replace) counts for a sequence of `len` real items.
///
/// A single shuffled item cannot move, so a count of one is raised to two.
/// When both sets do not fit disjointly the replace count shrinks first.
pub fn corruption_counts(len: usize, shuffle_rate: f64, replace_rate: f64) -> Result<(usize, usize)> {
    for (name, r) in [("shuffle_rate", shuffle_rate), ("replace_rate", replace_rate)] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(format!("{} = {} outside [0, 1]", name, r)));
        }
    }
    let mut k = rate_count(shuffle_rate, len);
    if k == 1 {
        k = 2;
    }
    if k > len {
        k = if len >= 2 { len } else { 0 };
    }
    let r = rate_count(replace_rate, len).min(len - k);
    Ok((k, r))
}

/// Shuffles about `shuffle_rate` of the items by a derangement (no shuffled
/// position keeps its item) and replaces about `replace_rate` further items
/// with draws from `pool`.
///
/// Shuffled positions are chosen to hold pairwise distinct items, so the
/// derangement of positions is also a derangement of content. Pool entries
/// that occur in `seq` are ignored; with an empty pool nothing is replaced.
pub fn corrupt_sequence<R: Rng + ?Sized>(
    seq: &[usize],
    pool: &[usize],
    shuffle_rate: f64,
    replace_rate: f64,
    rng: &mut R,
) -> Result<Corruption> {
    let len = seq.len();
    if len < 2 {
        return Err(Error::invalid(format!("cannot corrupt a sequence of length {}", len)));
    }
    let (k, mut r) = corruption_counts(len, shuffle_rate, replace_rate)?;
    let own: BTreeSet<usize> = seq.iter().copied().collect();
    let pool: Vec<usize> = pool.iter().copied().filter(|i| !own.contains(i)).collect();
    if pool.is_empty() {
        r = 0;
    }

    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    let mut chosen = Vec::with_capacity(k);
    let mut seen = BTreeSet::new();
    for &p in &order {
        if chosen.len() == k {
            break;
        }
        if seen.insert(seq[p]) {
            chosen.push(p);
        }
    }
    if chosen.len() < 2 {
        chosen.clear();
    }

    let mut items = seq.to_vec();
    let mut labels = vec![NoiseLabel::Unchanged; len];
    if !chosen.is_empty() {
        let mut perm: Vec<usize> = (0..chosen.len()).collect();
        loop {
            perm.shuffle(rng);
            if perm.iter().enumerate().all(|(i, p)| i != *p) {
                break;
            }
        }
        for (i, &p) in chosen.iter().enumerate() {
            items[p] = seq[chosen[perm[i]]];
            labels[p] = NoiseLabel::Shuffled;
        }
    }

    let rest: Vec<usize> = (0..len).filter(|p| labels[*p] == NoiseLabel::Unchanged).collect();
    for &p in rest.choose_multiple(rng, r.min(rest.len())) {
        items[p] = pool[rng.gen_range(0..pool.len())];
        labels[p] = NoiseLabel::Replaced;
    }
    Ok(Corruption { items, labels })
}
