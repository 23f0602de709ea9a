use super::*;
use crate::data::{Catalog, ItemRecord};
use crate::diffcore::{Graph, Tensor};
use crate::encoders::{EncoderConfig, PatchSequence, TokenSequence};
use crate::gradcheck::{check_model_gradients, jitter};
use crate::model::{ItemRepr, Model, ModelConfig};
use crate::user_encoder::UserEncoderConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
}

fn value(g: &Graph<f64>, id: NodeId) -> f64 {
    g.value(id).item().unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

fn row(t: &Tensor<f64>, r: usize) -> Vec<f64> {
    let d = t.last_dim();
    t.data()[r * d..(r + 1) * d].to_vec()
}

// −ln(Σ exp(pos) / Σ exp(all)), straight from the definition
fn neg_log_ratio(pos: &[f64], all: &[f64]) -> f64 {
    let p: f64 = pos.iter().map(|x| x.exp()).sum();
    let a: f64 = all.iter().map(|x| x.exp()).sum();
    -(p / a).ln()
}

fn negatives(seqs: &[Vec<usize>], u: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (k, s) in seqs.iter().enumerate() {
        if k != u {
            out.extend(s.iter().filter(|i| !seqs[u].contains(i)));
        }
    }
    out
}

fn dap_oracle(seqs: &[Vec<usize>], h: &Tensor<f64>, reps: &Tensor<f64>, layout: &BatchLayout) -> f64 {
    let mut terms = Vec::new();
    for (u, s) in seqs.iter().enumerate() {
        for l in 0..s.len() - 1 {
            let hv = row(h, u * layout.len + l);
            let score = |item: usize| dot(&hv, &row(reps, layout.column(item).unwrap()));
            let pos = score(s[l + 1]);
            let mut all = vec![pos];
            all.extend(negatives(seqs, u).into_iter().map(score));
            terms.push(neg_log_ratio(&[pos], &all));
        }
    }
    terms.iter().sum::<f64>() / terms.len() as f64
}

fn contrastive_oracle(
    variant: ContrastiveVariant,
    seqs: &[Vec<usize>],
    t: &Tensor<f64>,
    v: &Tensor<f64>,
    layout: &BatchLayout,
) -> f64 {
    let vec_of = |m: &Tensor<f64>, item: usize| normalize(&row(m, layout.column(item).unwrap()));
    let direction = |own: &Tensor<f64>, other: &Tensor<f64>| {
        let mut terms = Vec::new();
        for (u, s) in seqs.iter().enumerate() {
            let last = if variant == ContrastiveVariant::Nicl { s.len() - 1 } else { s.len() };
            for l in 0..last {
                let a = vec_of(own, s[l]);
                let mut pos = vec![dot(&a, &vec_of(other, s[l]))];
                let mut all = pos.clone();
                if variant == ContrastiveVariant::Nicl {
                    pos.push(dot(&a, &vec_of(other, s[l + 1])));
                    pos.push(dot(&a, &vec_of(own, s[l + 1])));
                }
                for n in negatives(seqs, u) {
                    all.push(dot(&a, &vec_of(other, n)));
                    if variant != ContrastiveVariant::Vcl {
                        all.push(dot(&a, &vec_of(own, n)));
                    }
                }
                terms.push(neg_log_ratio(&pos, &all));
            }
        }
        terms.iter().sum::<f64>() / terms.len() as f64
    };
    0.5 * (direction(t, v) + direction(v, t))
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, n_items: usize) -> Vec<Vec<usize>> {
    (0..b)
        .map(|_| {
            let len = rng.gen_range(2..6);
            (0..len).map(|_| rng.gen_range(0..n_items)).collect()
        })
        .collect()
}

#[test]
fn dap_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let seqs = random_batch(&mut rng, 4, 9);
        let layout = BatchLayout::new(&seqs).unwrap();
        let h = random(&[layout.b, layout.len, 5], &mut rng);
        let reps = random(&[layout.n_unique(), 5], &mut rng);
        let mut g = Graph::new();
        let (hn, rn) = (g.constant(h.clone()), g.constant(reps.clone()));
        let l = dap_loss(&mut g, hn, rn, &layout, 1.0).unwrap();
        let want = dap_oracle(&seqs, &h, &reps, &layout);
        assert!((value(&g, l) - want).abs() < 1e-10, "{} vs {}", value(&g, l), want);
    }
}

#[test]
fn contrastive_variants_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for variant in [ContrastiveVariant::Vcl, ContrastiveVariant::Icl, ContrastiveVariant::Nicl] {
        for _ in 0..10 {
            let seqs = random_batch(&mut rng, 3, 8);
            let layout = BatchLayout::new(&seqs).unwrap();
            let t = random(&[layout.n_unique(), 4], &mut rng);
            let v = random(&[layout.n_unique(), 4], &mut rng);
            let mut g = Graph::new();
            let (tn, vn) = (g.constant(t.clone()), g.constant(v.clone()));
            let l = contrastive_loss(&mut g, variant, tn, vn, &layout, 1.0).unwrap();
            let want = contrastive_oracle(variant, &seqs, &t, &v, &layout);
            assert!((value(&g, l) - want).abs() < 1e-10, "{variant:?}: {} vs {}", value(&g, l), want);
        }
    }
}

#[test]
fn nid_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, len, d) = (3, 4, 5);
    let h = random(&[b, len, d], &mut rng);
    let w = random(&[d, 3], &mut rng);
    let bias = random(&[3], &mut rng);
    let mask: Vec<bool> = (0..b * len).map(|p| p % len < 2 + p / len).collect();
    let labels: Vec<NoiseLabel> = (0..b * len)
        .map(|p| {
            if !mask[p] {
                NoiseLabel::Padding
            } else {
                [NoiseLabel::Unchanged, NoiseLabel::Shuffled, NoiseLabel::Replaced][p % 3]
            }
        })
        .collect();
    let mut g = Graph::new();
    let ids = [h.clone(), w.clone(), bias.clone()].map(|t| g.constant(t));
    let l = nid_loss(&mut g, ids[0], &labels, &mask, ids[1], ids[2]).unwrap();
    let mut terms = Vec::new();
    for p in (0..b * len).filter(|p| mask[*p]) {
        let hv = row(&h, p);
        let z: Vec<f64> = (0..3)
            .map(|c| (dot(&hv, &(0..d).map(|k| w.data()[k * 3 + c]).collect::<Vec<_>>()) + bias.data()[c]).max(0.0))
            .collect();
        terms.push(neg_log_ratio(&[z[labels[p].class().unwrap()]], &z));
    }
    let want = terms.iter().sum::<f64>() / terms.len() as f64;
    assert!((value(&g, l) - want).abs() < 1e-12);
}

#[test]
fn rcl_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (b, len, d) = (4, 5, 3);
    let lens = [5, 2, 3, 1];
    let mask: Vec<bool> = (0..b * len).map(|p| p % len < lens[p / len]).collect();
    let ho = random(&[b, len, d], &mut rng);
    let hc = random(&[b, len, d], &mut rng);
    for pooling in [Pooling::Mean, Pooling::Last] {
        let pool = |t: &Tensor<f64>, u: usize| -> Vec<f64> {
            let rows: Vec<usize> = match pooling {
                Pooling::Mean => (0..lens[u]).collect(),
                Pooling::Last => vec![lens[u] - 1],
            };
            let mut acc = vec![0.0; d];
            for r in &rows {
                for (a, x) in acc.iter_mut().zip(row(t, u * len + r)) {
                    *a += x / rows.len() as f64;
                }
            }
            acc
        };
        let mut terms = Vec::new();
        for u in 0..b {
            let all: Vec<f64> = (0..b).map(|v| dot(&pool(&ho, u), &pool(&hc, v))).collect();
            terms.push(neg_log_ratio(&[all[u]], &all));
        }
        let want = terms.iter().sum::<f64>() / b as f64;
        let mut g = Graph::new();
        let (o, c) = (g.constant(ho.clone()), g.constant(hc.clone()));
        let l = rcl_loss(&mut g, o, c, &mask, pooling, 1.0).unwrap();
        assert!((value(&g, l) - want).abs() < 1e-12, "{pooling:?}");
    }
}

#[test]
fn closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // B = 1: no negatives
    let seqs = vec![vec![3, 1, 4, 2]];
    let layout = BatchLayout::new(&seqs).unwrap();
    let mut g = Graph::new();
    let h = g.constant(random(&[1, 4, 6], &mut rng));
    let reps = g.constant(random(&[4, 6], &mut rng));
    let t = g.constant(random(&[4, 6], &mut rng));
    let v = g.constant(random(&[4, 6], &mut rng));
    let dap = dap_loss(&mut g, h, reps, &layout, 1.0).unwrap();
    assert_eq!(value(&g, dap), 0.0);
    let vcl = contrastive_loss(&mut g, ContrastiveVariant::Vcl, t, v, &layout, 1.0).unwrap();
    assert_eq!(value(&g, vcl), 0.0);
    let rcl = rcl_loss(&mut g, h, h, &layout.mask, Pooling::Mean, 1.0).unwrap();
    assert_eq!(value(&g, rcl), 0.0);

    // equal embeddings: NICL has three equal positives over one candidate
    let same = g.constant(Tensor::filled(&[4, 6], 0.3));
    let nicl = contrastive_loss(&mut g, ContrastiveVariant::Nicl, same, same, &layout, 1.0).unwrap();
    assert!((value(&g, nicl) + 3f64.ln()).abs() < 1e-9);

    // zero head: uniform three-way prediction
    let w = g.constant(Tensor::zeros(&[6, 3]));
    let b = g.constant(Tensor::zeros(&[3]));
    let labels = vec![NoiseLabel::Unchanged, NoiseLabel::Shuffled, NoiseLabel::Replaced, NoiseLabel::Unchanged];
    let nid = nid_loss(&mut g, h, &labels, &layout.mask, w, b).unwrap();
    assert!((value(&g, nid) - 3f64.ln()).abs() < 1e-9);

    // equal scores: DAP = ln(|negatives| + 1)
    let seqs = vec![vec![0, 1, 2], vec![3, 4], vec![5, 3, 6, 0]];
    let layout = BatchLayout::new(&seqs).unwrap();
    let mut g = Graph::new();
    let h = g.constant(Tensor::filled(&[3, 4, 5], 0.7));
    let reps = g.constant(Tensor::filled(&[layout.n_unique(), 5], -0.2));
    let dap = dap_loss(&mut g, h, reps, &layout, 1.0).unwrap();
    let want: f64 = layout
        .transitions()
        .iter()
        .map(|(u, _)| ((negatives(&seqs, *u).len() + 1) as f64).ln())
        .sum::<f64>()
        / layout.transitions().len() as f64;
    assert!((value(&g, dap) - want).abs() < 1e-9);
}

#[test]
fn negatives_exclude_own_items_and_keep_multiplicity() {
    let seqs = vec![vec![1, 2, 3], vec![3, 4, 4], vec![5, 1, 6]];
    let layout = BatchLayout::new(&seqs).unwrap();
    for u in 0..3 {
        let mut want = vec![0; layout.n_unique()];
        for i in negatives(&seqs, u) {
            want[layout.column(i).unwrap()] += 1;
        }
        assert_eq!(layout.neg_weights[u], want);
    }
    assert_eq!(layout.neg_weights[0][layout.column(4).unwrap()], 2);
    assert_eq!(layout.neg_weights[0][layout.column(3).unwrap()], 0);
}

#[test]
fn temperature_must_be_positive() {
    let seqs = vec![vec![0, 1], vec![2, 3]];
    let layout = BatchLayout::new(&seqs).unwrap();
    let mut g = Graph::<f64>::new();
    let h = g.constant(Tensor::zeros(&[2, 2, 2]));
    let r = g.constant(Tensor::zeros(&[4, 2]));
    assert!(dap_loss(&mut g, h, r, &layout, 0.0).is_err());
    assert!(rcl_loss(&mut g, h, h, &layout.mask, Pooling::Mean, -1.0).is_err());
}

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d: 8,
            n_blocks: 1,
            n_heads: 2,
            vocab_size: 12,
            p_max: 4,
            q: 4,
            patch_dim: 3,
            trainable_top_blocks: None,
            patch_positions: true,
        },
        user: UserEncoderConfig {
            n_blocks: 1,
            n_heads: 2,
            l_max: 6,
            dropout: 0.0,
        },
    }
}

pub(crate) fn tiny_catalog(n: usize, seed: u64) -> Catalog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Catalog::new(
        (0..n)
            .map(|i| {
                let len = rng.gen_range(1..=5);
                ItemRecord {
                    catalog_index: 100 + i,
                    tokens: TokenSequence::new((0..len).map(|_| rng.gen_range(1..12)).collect()),
                    patches: PatchSequence::new((0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(), 4, 3).unwrap(),
                }
            })
            .collect(),
    )
    .unwrap()
}

fn every_objective() -> ObjectiveConfig {
    ObjectiveConfig {
        shuffle_rate: 0.5,
        replace_rate: 0.25,
        ..ObjectiveConfig::pretrain()
    }
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let mut model = Model::<f64>::new(tiny_config(), ItemRepr::Fused, 1).unwrap();
    jitter(&mut model, 0.2, 9);
    let catalog = tiny_catalog(7, 2);
    let batch = Batch::new(vec![0, 1], vec![vec![100, 101, 102, 103], vec![104, 105, 106]], 11).unwrap();
    let cfg = every_objective();
    let report = check_model_gradients(
        &model,
        |s, m| Ok(total_loss(s, m, &batch, &catalog, &cfg)?.total),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.pass(), "{:?}", report.worst());
    assert!(report.params.iter().any(|p| p.name.starts_with("nid_head")));
}

#[test]
fn total_is_weighted_sum_of_components() {
    let model = Model::<f64>::new(tiny_config(), ItemRepr::Fused, 1).unwrap();
    let catalog = tiny_catalog(7, 2);
    let batch = Batch::new(vec![0, 1, 2], vec![vec![100, 101, 102], vec![103, 104], vec![105, 106, 100]], 3).unwrap();
    let mut cfg = every_objective();
    cfg.weights = LossWeights {
        dap: 1.0,
        contrastive: 0.5,
        nid: 2.0,
        rcl: 0.25,
    };
    let mut s = model.session();
    let out = total_loss(&mut s, &model, &batch, &catalog, &cfg).unwrap();
    let b = &out.breakdown;
    let want = b.dap.unwrap() + 0.5 * b.contrastive.unwrap() + 2.0 * b.nid.unwrap() + 0.25 * b.rcl.unwrap();
    assert!((b.total - want).abs() < 1e-12);
}

#[test]
fn loss_does_not_depend_on_user_order() {
    let model = Model::<f64>::new(tiny_config(), ItemRepr::Fused, 5).unwrap();
    let catalog = tiny_catalog(7, 2);
    let seqs = vec![vec![100, 101, 102, 103, 104], vec![103, 104, 105], vec![106, 100, 101, 105]];
    let a = Batch::new(vec![7, 8, 9], seqs.clone(), 42).unwrap();
    let b = Batch::new(vec![9, 7, 8], vec![seqs[2].clone(), seqs[0].clone(), seqs[1].clone()], 42).unwrap();
    let cfg = every_objective();
    let eval = |batch: &Batch| {
        let mut s = model.session();
        total_loss(&mut s, &model, batch, &catalog, &cfg).unwrap().breakdown
    };
    let (x, y) = (eval(&a), eval(&b));
    for (p, q) in [(x.dap, y.dap), (x.contrastive, y.contrastive), (x.nid, y.nid), (x.rcl, y.rcl)] {
        assert!((p.unwrap() - q.unwrap()).abs() < 1e-12);
    }
}

#[test]
fn dap_leaves_nid_head_untouched() {
    let model = Model::<f64>::new(tiny_config(), ItemRepr::Fused, 5).unwrap();
    let catalog = tiny_catalog(7, 2);
    let batch = Batch::new(vec![0, 1], vec![vec![100, 101, 102], vec![103, 104]], 1).unwrap();
    let mut s = model.session();
    let out = total_loss(&mut s, &model, &batch, &catalog, &ObjectiveConfig::finetune()).unwrap();
    let grads = s.g.backward(out.total).unwrap();
    let pg = s.param_grads(&grads);
    assert!(pg.keys().all(|k| !k.starts_with("nid_head")));
    assert!(pg.keys().any(|k| k.starts_with("user_encoder")));
    assert!(out.breakdown.nid.is_none());
}

#[test]
fn contrastive_needs_both_modalities() {
    let model = Model::<f64>::new(tiny_config(), ItemRepr::Text, 5).unwrap();
    let catalog = tiny_catalog(7, 2);
    let batch = Batch::new(vec![0, 1], vec![vec![100, 101, 102], vec![103, 104]], 1).unwrap();
    let mut s = model.session();
    assert!(total_loss(&mut s, &model, &batch, &catalog, &ObjectiveConfig::pretrain()).is_err());
    let mut s = model.session();
    let cfg = ObjectiveConfig {
        contrastive: None,
        ..ObjectiveConfig::pretrain()
    };
    assert!(total_loss(&mut s, &model, &batch, &catalog, &cfg).is_ok());
}

#[test]
fn corrupt_batch_draws_replacements_from_other_users() {
    let seqs: Vec<Vec<usize>> = (0..4).map(|u| (0..20).map(|l| u * 100 + l).collect()).collect();
    let batch = Batch::new(vec![0, 1, 2, 3], seqs.clone(), 5).unwrap();
    for (u, c) in corrupt_batch(&batch, 0.15, 0.05).unwrap().iter().enumerate() {
        assert_eq!(c.histogram(), (16, 3, 1));
        for (l, lab) in c.labels.iter().enumerate() {
            if *lab == NoiseLabel::Replaced {
                assert!(!seqs[u].contains(&c.items[l]));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn dap_is_nonnegative_and_matches_oracle(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs = random_batch(&mut rng, 3, 6);
        let layout = BatchLayout::new(&seqs).unwrap();
        let h = random(&[layout.b, layout.len, 3], &mut rng);
        let reps = random(&[layout.n_unique(), 3], &mut rng);
        let mut g = Graph::new();
        let (hn, rn) = (g.constant(h.clone()), g.constant(reps.clone()));
        let l = dap_loss(&mut g, hn, rn, &layout, 1.0).unwrap();
        let l = value(&g, l);
        prop_assert!(l >= 0.0);
        prop_assert!((l - dap_oracle(&seqs, &h, &reps, &layout)).abs() < 1e-10);
    }
}
