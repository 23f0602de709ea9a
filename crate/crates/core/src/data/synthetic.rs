//! Synthetic source/target datasets with a planted style-level chain.
//!
//! Every item has a latent style. Its tokens come from a vocabulary band
//! owned by that style and its patches scatter around a style mean. Users
//! walk a Markov chain over styles and pick items by within-style Zipf
//! popularity. Source and target share styles, content distributions and
//! the chain but no items, so only content carries over.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, ItemRecord, UserSequence};
use crate::encoders::{PatchSequence, TokenSequence};
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub target_users: usize,
    pub target_items: usize,
    pub l_min: usize,
    pub l_max: usize,
    pub vocab_size: usize,
    /// Tokens per item.
    pub text_len: usize,
    pub q: usize,
    pub patch_dim: usize,
    pub n_latent_styles: usize,
    /// Per-step probability of a uniformly random item.
    pub transition_noise: f64,
    /// Probability of following the chain's successor style; the rest is
    /// spread evenly over the other styles.
    pub dominant_prob: f64,
    /// Within-style popularity `rank^-s`.
    pub zipf_exponent: f64,
    /// Std of patch values around the style mean.
    pub patch_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 5000,
            n_items: 400,
            target_users: 500,
            target_items: 400,
            l_min: 5,
            l_max: 20,
            vocab_size: 1000,
            text_len: 6,
            q: 16,
            patch_dim: 12,
            n_latent_styles: 8,
            transition_noise: 0.1,
            dominant_prob: 1.0,
            zipf_exponent: 1.0,
            patch_noise: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| {
            Err(Error::Config {
                key: key.into(),
                detail,
            })
        };
        let s = self.n_latent_styles;
        if s < 2 {
            return bad("n_latent_styles", format!("{} < 2", s));
        }
        if !(0.0..=1.0).contains(&self.transition_noise) {
            return bad("transition_noise", format!("{} outside [0, 1]", self.transition_noise));
        }
        if !(0.0..=1.0).contains(&self.dominant_prob) {
            return bad("dominant_prob", format!("{} outside [0, 1]", self.dominant_prob));
        }
        if self.n_items < s || (self.target_items > 0 && self.target_items < s) {
            return bad("n_items", format!("every style needs an item in each domain ({} styles)", s));
        }
        if self.l_min < 1 || self.l_min > self.l_max {
            return bad("l_min", format!("need 1 <= l_min <= l_max, got {}..{}", self.l_min, self.l_max));
        }
        if self.vocab_size < s + 1 {
            return bad("vocab_size", format!("{} leaves no token band per style", self.vocab_size));
        }
        if self.text_len == 0 || self.q == 0 || self.patch_dim == 0 {
            return bad("text_len", "text length and patch grid must be positive".into());
        }
        if !self.zipf_exponent.is_finite() || self.zipf_exponent < 0.0 {
            return bad("zipf_exponent", format!("{}", self.zipf_exponent));
        }
        if !self.patch_noise.is_finite() || self.patch_noise < 0.0 {
            return bad("patch_noise", format!("{}", self.patch_noise));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub source: Dataset,
    pub target: Dataset,
    /// Planted style transition matrix (noise excluded).
    pub transition: Vec<Vec<f64>>,
    /// Style of every catalog index, source then target.
    pub item_styles: Vec<usize>,
}

impl SyntheticData {
    pub fn style_of(&self, catalog_index: usize) -> usize {
        self.item_styles[catalog_index]
    }
}

struct Domain {
    offset: usize,
    n_items: usize,
    styles: usize,
}

impl Domain {
    fn style(&self, local: usize) -> usize {
        local % self.styles
    }

    fn members(&self, style: usize) -> Vec<usize> {
        (style..self.n_items).step_by(self.styles).collect()
    }
}

fn items_for(cfg: &SyntheticConfig, dom: &Domain, means: &[Vec<f64>], label: &str) -> Vec<ItemRecord> {
    let mut rng = rng_for(cfg.seed, label);
    let band = (cfg.vocab_size - 1) / cfg.n_latent_styles;
    (0..dom.n_items)
        .map(|local| {
            let s = dom.style(local);
            let lo = 1 + s * band;
            let tokens = (0..cfg.text_len).map(|_| rng.gen_range(lo..lo + band)).collect();
            let values = (0..cfg.q * cfg.patch_dim)
                .map(|k| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    means[s][k % cfg.patch_dim] + cfg.patch_noise * z
                })
                .collect();
            ItemRecord {
                catalog_index: dom.offset + local,
                tokens: TokenSequence::new(tokens),
                patches: PatchSequence::new(values, cfg.q, cfg.patch_dim).expect("shape by construction"),
            }
        })
        .collect()
}

fn users_for(
    cfg: &SyntheticConfig,
    dom: &Domain,
    n_users: usize,
    transition: &[Vec<f64>],
    label: &str,
    prefix: &str,
) -> Vec<UserSequence> {
    let mut rng = rng_for(cfg.seed, label);
    let s = cfg.n_latent_styles;
    let members: Vec<Vec<usize>> = (0..s).map(|st| dom.members(st)).collect();
    let popularity: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| {
            let w: Vec<f64> = (0..m.len()).map(|r| (r as f64 + 1.0).powf(-cfg.zipf_exponent)).collect();
            WeightedIndex::new(w).expect("non-empty style")
        })
        .collect();
    let next_style: Vec<WeightedIndex<f64>> = transition
        .iter()
        .map(|row| WeightedIndex::new(row.clone()).expect("row has mass"))
        .collect();
    (0..n_users)
        .map(|u| {
            let len = rng.gen_range(cfg.l_min..=cfg.l_max);
            let mut items = Vec::with_capacity(len);
            let mut style = rng.gen_range(0..s);
            for step in 0..len {
                if step > 0 {
                    style = next_style[style].sample(&mut rng);
                }
                let local = if step > 0 && rng.gen::<f64>() < cfg.transition_noise {
                    let l = rng.gen_range(0..dom.n_items);
                    style = dom.style(l);
                    l
                } else {
                    members[style][popularity[style].sample(&mut rng)]
                };
                items.push(dom.offset + local);
            }
            UserSequence {
                user_id: format!("{prefix}{u}"),
                items,
            }
        })
        .collect()
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let s = cfg.n_latent_styles;

    // the chain is one random cycle through all styles
    let mut order: Vec<usize> = (0..s).collect();
    order.shuffle(&mut rng_for(cfg.seed, "style-chain"));
    let mut transition = vec![vec![(1.0 - cfg.dominant_prob) / (s - 1) as f64; s]; s];
    for k in 0..s {
        let (from, to) = (order[k], order[(k + 1) % s]);
        transition[from][to] = cfg.dominant_prob;
    }

    let mut mrng = rng_for(cfg.seed, "style-means");
    let means: Vec<Vec<f64>> = (0..s)
        .map(|_| (0..cfg.patch_dim).map(|_| StandardNormal.sample(&mut mrng)).collect())
        .collect();

    let src = Domain {
        offset: 0,
        n_items: cfg.n_items,
        styles: s,
    };
    let tgt = Domain {
        offset: cfg.n_items,
        n_items: cfg.target_items,
        styles: s,
    };
    let source = Dataset {
        items: items_for(cfg, &src, &means, "source-items"),
        users: users_for(cfg, &src, cfg.n_users, &transition, "source-users", "s"),
    };
    let target = if cfg.target_items == 0 {
        Dataset {
            items: Vec::new(),
            users: Vec::new(),
        }
    } else {
        Dataset {
            items: items_for(cfg, &tgt, &means, "target-items"),
            users: users_for(cfg, &tgt, cfg.target_users, &transition, "target-users", "t"),
        }
    };
    let item_styles = (0..cfg.n_items)
        .map(|l| src.style(l))
        .chain((0..cfg.target_items).map(|l| tgt.style(l)))
        .collect();
    Ok(SyntheticData {
        source,
        target,
        transition,
        item_styles,
    })
}
