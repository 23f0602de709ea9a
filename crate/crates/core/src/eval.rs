//! Full-catalog leave-one-out ranking: HR@k and NDCG@k.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{cold_item_subsequences, Catalog, SplitDataset};
use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 3] = [10, 20, 50];

/// Anything that scores every catalog item (in catalog order) given a
/// user's history.
pub trait Scorer {
    fn score(&mut self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

/// Content-blind baseline: i.i.d. uniform scores.
pub struct RandomScorer {
    n_items: usize,
    rng: ChaCha8Rng,
}

impl RandomScorer {
    pub fn new(n_items: usize, seed: u64) -> Self {
        Self {
            n_items,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Scorer for RandomScorer {
    fn score(&mut self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|_| (0..self.n_items).map(|_| self.rng.gen::<f64>()).collect())
            .collect())
    }
}

/// 1-based rank of `target` (a catalog position). Items with an equal
/// score are placed ahead of the target.
pub fn rank_of_target(scores: &[f64], target: usize) -> Result<usize> {
    let t = *scores
        .get(target)
        .ok_or_else(|| Error::invalid(format!("target position {} outside {} scores", target, scores.len())))?;
    if t.is_nan() {
        return Err(Error::invalid("target score is NaN"));
    }
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|(i, s)| *i != target && **s >= t)
        .count();
    Ok(1 + ahead)
}

/// (HR@k, NDCG@k) as fractions.
pub fn ranking_metrics(ranks: &[usize], k: usize) -> Result<(f64, f64)> {
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if ranks.iter().any(|r| *r == 0) {
        return Err(Error::invalid("ranks are 1-based"));
    }
    if ranks.is_empty() {
        return Ok((0.0, 0.0));
    }
    // sorted so the floating-point sum does not depend on user order
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let hits = sorted.iter().filter(|r| **r <= k).count();
    let gain: f64 = sorted
        .iter()
        .filter(|r| **r <= k)
        .map(|r| 1.0 / ((*r as f64) + 1.0).log2())
        .sum();
    let n = ranks.len() as f64;
    Ok((hits as f64 / n, gain / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Valid,
    Test,
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Phase::Valid),
            "test" => Ok(Phase::Test),
            other => Err(Error::invalid(format!("unknown phase `{other}` (valid|test)"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Push items already in the prefix to the bottom of the ranking.
    pub exclude_seen: bool,
    /// Users scored per call.
    pub chunk: usize,
}

impl EvalOptions {
    fn chunk(&self) -> usize {
        if self.chunk == 0 {
            256
        } else {
            self.chunk
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    /// percent
    pub hr: f64,
    /// percent
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub mode: String,
    pub phase: String,
    pub count: usize,
    pub metrics: Vec<AtK>,
}

impl MetricsReport {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Result<Self> {
        let metrics = ks
            .iter()
            .map(|&k| {
                let (hr, ndcg) = ranking_metrics(ranks, k)?;
                Ok(AtK {
                    k,
                    hr: 100.0 * hr,
                    ndcg: 100.0 * ndcg,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dataset: String::new(),
            mode: String::new(),
            phase: String::new(),
            count: ranks.len(),
            metrics,
        })
    }

    pub fn labeled(mut self, dataset: &str, mode: &str, phase: &str) -> Self {
        self.dataset = dataset.into();
        self.mode = mode.into();
        self.phase = phase.into();
        self
    }

    pub fn hr(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.k == k).map(|m| m.hr)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.k == k).map(|m| m.ndcg)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "dataset={} mode={} phase={} n={}",
            self.dataset, self.mode, self.phase, self.count
        )?;
        writeln!(f, "{:>6} {:>9} {:>9}", "k", "HR@k", "NDCG@k")?;
        for m in &self.metrics {
            writeln!(f, "{:>6} {:>9.4} {:>9.4}", m.k, m.hr, m.ndcg)?;
        }
        Ok(())
    }
}

/// Ranks each `(prefix, target)` case over the full catalog.
pub fn case_ranks(
    scorer: &mut dyn Scorer,
    catalog: &Catalog,
    cases: &[(Vec<usize>, usize)],
    opts: &EvalOptions,
) -> Result<Vec<usize>> {
    let mut ranks = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(opts.chunk()) {
        let prefixes: Vec<&[usize]> = chunk.iter().map(|(p, _)| p.as_slice()).collect();
        let scores = scorer.score(&prefixes)?;
        if scores.len() != chunk.len() {
            return Err(Error::invalid("scorer returned the wrong number of score vectors"));
        }
        for ((prefix, target), mut s) in chunk.iter().zip(scores) {
            if s.len() != catalog.len() {
                return Err(Error::invalid(format!(
                    "{} scores for a catalog of {}",
                    s.len(),
                    catalog.len()
                )));
            }
            let t = catalog.position(*target).ok_or(Error::UnknownItem(*target))?;
            if opts.exclude_seen {
                let seen: BTreeSet<usize> = prefix.iter().filter(|i| *i != target).copied().collect();
                for i in seen {
                    if let Some(p) = catalog.position(i) {
                        s[p] = f64::NEG_INFINITY;
                    }
                }
            }
            ranks.push(rank_of_target(&s, t)?);
        }
    }
    Ok(ranks)
}

/// Leave-one-out cases: training prefix → validation item, or training
/// prefix plus validation item → test item.
pub fn split_cases(split: &SplitDataset, phase: Phase) -> Vec<(Vec<usize>, usize)> {
    split
        .users
        .iter()
        .map(|u| match phase {
            Phase::Valid => (u.valid_prefix().to_vec(), u.valid),
            Phase::Test => (u.test_prefix(), u.test),
        })
        .filter(|(p, _)| !p.is_empty())
        .collect()
}

pub fn evaluate(
    scorer: &mut dyn Scorer,
    split: &SplitDataset,
    catalog: &Catalog,
    phase: Phase,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let ranks = case_ranks(scorer, catalog, &split_cases(split, phase), opts)?;
    let name = match phase {
        Phase::Valid => "valid",
        Phase::Test => "test",
    };
    Ok(MetricsReport::from_ranks(&ranks, &DEFAULT_KS)?.labeled("", "", name))
}

/// Evaluation restricted to prefixes that end right before a cold item.
pub fn evaluate_cold_start(
    scorer: &mut dyn Scorer,
    split: &SplitDataset,
    catalog: &Catalog,
    threshold: usize,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let cases: Vec<(Vec<usize>, usize)> = cold_item_subsequences(split, threshold)
        .into_iter()
        .map(|c| (c.prefix, c.target))
        .collect();
    let ranks = case_ranks(scorer, catalog, &cases, opts)?;
    Ok(MetricsReport::from_ranks(&ranks, &DEFAULT_KS)?.labeled("", "", "cold"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of_target(&[0.1, 0.9, 0.3], 1).unwrap(), 1);
        assert_eq!(rank_of_target(&[0.9, 0.9, 0.9, 0.1], 1).unwrap(), 3);
        assert!(rank_of_target(&[0.1], 3).is_err());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(ranking_metrics(&[1], 10).unwrap(), (1.0, 1.0));
        assert_eq!(ranking_metrics(&[3], 10).unwrap(), (1.0, 0.5));
        assert_eq!(ranking_metrics(&[11], 10).unwrap(), (0.0, 0.0));
        assert!(ranking_metrics(&[1], 0).is_err());
    }

    proptest! {
        #[test]
        fn rank_matches_full_sort(scores in prop::collection::vec(0u8..20, 1..200), pick in 0usize..200) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let t = pick % scores.len();
            // order: score descending, target last among equals
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then((*a == t).cmp(&(*b == t))));
            let want = 1 + order.iter().position(|i| *i == t).unwrap();
            prop_assert_eq!(rank_of_target(&scores, t).unwrap(), want);
        }

        #[test]
        fn metrics_are_ordered(ranks in prop::collection::vec(1usize..80, 1..50)) {
            let mut prev = (0.0, 0.0);
            for k in [1, 5, 10, 20, 50, 100] {
                let (hr, ndcg) = ranking_metrics(&ranks, k).unwrap();
                prop_assert!(ndcg <= hr + 1e-15 && hr <= 1.0 && ndcg >= 0.0);
                prop_assert!(hr >= prev.0 && ndcg >= prev.1);
                prev = (hr, ndcg);
            }
            let mut rev = ranks.clone();
            rev.reverse();
            prop_assert_eq!(ranking_metrics(&rev, 10).unwrap(), ranking_metrics(&ranks, 10).unwrap());
        }
    }
}
