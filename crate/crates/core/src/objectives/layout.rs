use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A padded block of user sequences: the unit of training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    /// Stable user keys; corruption streams are keyed by them, which keeps
    /// every loss independent of the order of users within the batch.
    pub users: Vec<usize>,
    /// Real items only (catalog indices, oldest first).
    pub sequences: Vec<Vec<usize>>,
    pub seed: u64,
}

impl Batch {
    pub fn new(users: Vec<usize>, sequences: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        if users.len() != sequences.len() || sequences.is_empty() {
            return Err(Error::invalid("batch needs one user key per non-empty sequence list"));
        }
        if let Some(s) = sequences.iter().find(|s| s.len() < 2) {
            return Err(Error::invalid(format!(
                "batch sequence of length {} has no transition",
                s.len()
            )));
        }
        Ok(Self {
            users,
            sequences,
            seed,
        })
    }

    pub fn size(&self) -> usize {
        self.sequences.len()
    }

    /// Padded length.
    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).max().unwrap_or(0)
    }

    pub fn seq_mask(&self) -> Vec<bool> {
        let len = self.max_len();
        self.sequences
            .iter()
            .flat_map(|s| (0..len).map(move |l| l < s.len()))
            .collect()
    }
}

/// In-batch negatives: for each user, every occurrence (user, position) in
/// the other users' sequences whose item the user never interacted with.
/// All anchors of one user share the same set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSet {
    per_user: Vec<Vec<(usize, usize)>>,
}

impl NegativeSet {
    pub fn build(sequences: &[Vec<usize>]) -> Self {
        let own: Vec<BTreeSet<usize>> = sequences.iter().map(|s| s.iter().copied().collect()).collect();
        let per_user = (0..sequences.len())
            .map(|u| {
                let mut v = Vec::new();
                for (k, seq) in sequences.iter().enumerate() {
                    if k == u {
                        continue;
                    }
                    for (j, item) in seq.iter().enumerate() {
                        if !own[u].contains(item) {
                            v.push((k, j));
                        }
                    }
                }
                v
            })
            .collect();
        Self { per_user }
    }

    pub fn for_user(&self, u: usize) -> &[(usize, usize)] {
        &self.per_user[u]
    }

    pub fn num_users(&self) -> usize {
        self.per_user.len()
    }
}

/// Index bookkeeping shared by every loss on one batch.
///
/// Items are deduplicated into `unique` (ascending catalog index); every
/// score matrix has one column per unique item, and multiplicities of
/// negatives become column weights.
#[derive(Clone, Debug)]
pub struct BatchLayout {
    pub b: usize,
    pub len: usize,
    pub lens: Vec<usize>,
    pub unique: Vec<usize>,
    /// `[b * len]` column of the item at each position (0 at padding).
    pub occ: Vec<usize>,
    pub mask: Vec<bool>,
    /// `neg_weights[u][c]`: how many negative occurrences of unique item `c`
    /// user `u` has.
    pub neg_weights: Vec<Vec<usize>>,
}

impl BatchLayout {
    pub fn new(sequences: &[Vec<usize>]) -> Result<Self> {
        Self::with_extra(sequences, &[])
    }

    /// Like [`new`](Self::new) but also reserves columns for `extra` items
    /// (e.g. corruption replacements) that never count as negatives.
    pub fn with_extra(sequences: &[Vec<usize>], extra: &[usize]) -> Result<Self> {
        if sequences.is_empty() || sequences.iter().any(|s| s.is_empty()) {
            return Err(Error::invalid("layout needs at least one non-empty sequence"));
        }
        let b = sequences.len();
        let len = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
        let unique: Vec<usize> = sequences
            .iter()
            .flatten()
            .chain(extra)
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let col: BTreeMap<usize, usize> = unique.iter().enumerate().map(|(c, i)| (*i, c)).collect();
        let mut occ = vec![0; b * len];
        let mut mask = vec![false; b * len];
        for (u, s) in sequences.iter().enumerate() {
            for (l, item) in s.iter().enumerate() {
                occ[u * len + l] = col[item];
                mask[u * len + l] = true;
            }
        }
        let negs = NegativeSet::build(sequences);
        let neg_weights = (0..b)
            .map(|u| {
                let mut w = vec![0usize; unique.len()];
                for &(k, j) in negs.for_user(u) {
                    w[col[&sequences[k][j]]] += 1;
                }
                w
            })
            .collect();
        Ok(Self {
            b,
            len,
            lens: sequences.iter().map(|s| s.len()).collect(),
            unique,
            occ,
            mask,
            neg_weights,
        })
    }

    pub fn n_unique(&self) -> usize {
        self.unique.len()
    }

    pub fn column(&self, catalog_index: usize) -> Option<usize> {
        self.unique.binary_search(&catalog_index).ok()
    }

    /// (user, position) pairs that have a next item.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        (0..self.b)
            .flat_map(|u| (0..self.lens[u].saturating_sub(1)).map(move |l| (u, l)))
            .collect()
    }

    /// Every real (user, position).
    pub fn positions(&self) -> Vec<(usize, usize)> {
        (0..self.b)
            .flat_map(|u| (0..self.lens[u]).map(move |l| (u, l)))
            .collect()
    }

    pub fn col_at(&self, u: usize, l: usize) -> usize {
        self.occ[u * self.len + l]
    }
}
