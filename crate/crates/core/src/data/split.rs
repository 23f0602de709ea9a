//! Minimum-interaction filtering and leave-one-out splitting.

use std::collections::{BTreeSet, HashMap};

use super::{Catalog, Dataset, ItemRecord, UserSequence};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitUser {
    pub user_id: String,
    pub train: Vec<usize>,
    /// Second-to-last item.
    pub valid: usize,
    /// Last item.
    pub test: usize,
}

impl SplitUser {
    /// Input for predicting the validation target.
    pub fn valid_prefix(&self) -> &[usize] {
        &self.train
    }

    /// Input for predicting the test target: train followed by validation.
    pub fn test_prefix(&self) -> Vec<usize> {
        let mut p = self.train.clone();
        p.push(self.valid);
        p
    }

    pub fn full(&self) -> Vec<usize> {
        let mut p = self.test_prefix();
        p.push(self.test);
        p
    }
}

#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub items: Vec<ItemRecord>,
    pub users: Vec<SplitUser>,
}

impl SplitDataset {
    pub fn catalog(&self) -> Result<Catalog> {
        Catalog::new(self.items.clone())
    }

    /// Back to a plain dataset (full sequences).
    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            items: self.items.clone(),
            users: self
                .users
                .iter()
                .map(|u| UserSequence {
                    user_id: u.user_id.clone(),
                    items: u.full(),
                })
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Drops users and items with fewer than `min_interactions` interactions,
/// repeating until nothing changes. Repeat interactions count separately.
pub fn filter(ds: &Dataset, min_interactions: usize) -> Dataset {
    let mut users: Vec<UserSequence> = ds.users.clone();
    let mut alive: BTreeSet<usize> = ds.items.iter().map(|i| i.catalog_index).collect();
    loop {
        let mut changed = false;
        let before = users.len();
        users.retain(|u| u.items.len() >= min_interactions);
        changed |= users.len() != before;

        let mut counts: HashMap<usize, usize> = HashMap::new();
        for u in &users {
            for i in &u.items {
                *counts.entry(*i).or_default() += 1;
            }
        }
        let before = alive.len();
        alive.retain(|i| counts.get(i).copied().unwrap_or(0) >= min_interactions);
        changed |= alive.len() != before;
        for u in &mut users {
            let n = u.items.len();
            u.items.retain(|i| alive.contains(i));
            changed |= u.items.len() != n;
        }
        if !changed {
            break;
        }
    }
    Dataset {
        items: ds
            .items
            .iter()
            .filter(|i| alive.contains(&i.catalog_index))
            .cloned()
            .collect(),
        users,
    }
}

/// Filters, then assigns each user's last item to test, the one before to
/// validation and the rest to training. Users left with fewer than three
/// items are dropped.
pub fn filter_and_split(ds: &Dataset, min_interactions: usize) -> Result<SplitDataset> {
    ds.validate()?;
    let f = filter(ds, min_interactions);
    let users: Vec<SplitUser> = f
        .users
        .iter()
        .filter(|u| u.items.len() >= 3)
        .map(|u| {
            let n = u.items.len();
            SplitUser {
                user_id: u.user_id.clone(),
                train: u.items[..n - 2].to_vec(),
                valid: u.items[n - 2],
                test: u.items[n - 1],
            }
        })
        .collect();
    if users.is_empty() {
        return Err(Error::invalid(format!(
            "no user survives filtering at {} interactions",
            min_interactions
        )));
    }
    Ok(SplitDataset { items: f.items, users })
}
