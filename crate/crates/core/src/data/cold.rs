//! Cold items: fewer than `threshold` occurrences in the training part of
//! the split.

use std::collections::HashMap;

use super::SplitDataset;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColdCase {
    pub user: usize,
    pub prefix: Vec<usize>,
    pub target: usize,
}

pub fn train_occurrences(split: &SplitDataset) -> HashMap<usize, usize> {
    let mut counts = HashMap::new();
    for u in &split.users {
        for i in &u.train {
            *counts.entry(*i).or_insert(0) += 1;
        }
    }
    counts
}

/// Every occurrence of a cold item after the first position of a user's
/// full sequence yields (items before it, item). All occurrences count, so
/// one user can contribute several cases.
pub fn cold_item_subsequences(split: &SplitDataset, threshold: usize) -> Vec<ColdCase> {
    let counts = train_occurrences(split);
    let mut out = Vec::new();
    for (u, user) in split.users.iter().enumerate() {
        let full = user.full();
        for (p, item) in full.iter().enumerate().skip(1) {
            if counts.get(item).copied().unwrap_or(0) < threshold {
                out.push(ColdCase {
                    user: u,
                    prefix: full[..p].to_vec(),
                    target: *item,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ItemRecord, SplitUser};
    use crate::encoders::{PatchSequence, TokenSequence};
    use proptest::prelude::*;

    fn split(users: Vec<(Vec<usize>, usize, usize)>) -> SplitDataset {
        SplitDataset {
            items: (0..12)
                .map(|i| ItemRecord {
                    catalog_index: i,
                    tokens: TokenSequence::new(vec![1]),
                    patches: PatchSequence::new(vec![0.0], 1, 1).unwrap(),
                })
                .collect(),
            users: users
                .into_iter()
                .enumerate()
                .map(|(u, (train, valid, test))| SplitUser {
                    user_id: u.to_string(),
                    train,
                    valid,
                    test,
                })
                .collect(),
        }
    }

    #[test]
    fn ten_occurrences_is_not_cold() {
        let s = split(vec![(vec![0; 10], 1, 2), (vec![1; 9], 0, 3)]);
        let c = cold_item_subsequences(&s, 10);
        assert!(c.iter().all(|c| c.target != 0));
        // item 1 (9 occurrences) is cold everywhere after position 0
        assert_eq!(c.iter().filter(|c| c.target == 1).count(), 9);
    }

    #[test]
    fn unseen_test_target_is_cold() {
        let s = split(vec![(vec![0; 10], 0, 7)]);
        let c = cold_item_subsequences(&s, 10);
        assert_eq!(
            c,
            vec![ColdCase {
                user: 0,
                prefix: vec![0; 11],
                target: 7
            }]
        );
    }

    proptest! {
        #[test]
        fn matches_brute_force_scan(
            users in prop::collection::vec((prop::collection::vec(0usize..12, 1..15), 0usize..12, 0usize..12), 1..8),
            threshold in 1usize..6,
        ) {
            let s = split(users);
            let got = cold_item_subsequences(&s, threshold);
            let mut want = 0;
            for u in &s.users {
                let full = u.full();
                for p in 1..full.len() {
                    let n = s.users.iter().flat_map(|v| v.train.iter()).filter(|x| **x == full[p]).count();
                    if n < threshold {
                        want += 1;
                        prop_assert!(got.iter().any(|c| c.prefix == full[..p] && c.target == full[p]));
                    }
                }
            }
            prop_assert_eq!(got.len(), want);
        }
    }
}
