//! End-to-end acceptance checks. One PASS/FAIL line per check; the process
//! exits nonzero if any check fails.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mmrec::data::{
    cold_item_subsequences, filter_and_split, generate_synthetic, Catalog, ItemRecord, SplitDataset, SplitUser,
    SyntheticConfig,
};
use mmrec::diffcore::{Graph, Tensor};
use mmrec::encoders::{EncoderConfig, PatchSequence, TokenSequence};
use mmrec::eval::{case_ranks, evaluate, evaluate_cold_start, split_cases, EvalOptions, MetricsReport, Phase, RandomScorer, Scorer};
use mmrec::gradcheck::{jitter, run_loss_suite, SuiteConfig};
use mmrec::model::{ItemRepr, Model, ModelConfig};
use mmrec::objectives::{
    contrastive_loss, corrupt_batch, dap_loss, nid_loss, rcl_loss, Batch, BatchLayout, ContrastiveVariant, NoiseLabel,
    Pooling,
};
use mmrec::training::{finetune, pretrain, train_with_hook, Control, TrainConfig, TrainOutcome};
use mmrec::transfer::{bundle_bytes, load_components, load_model, parse_bundle, build_item_index, score_logits, save_bundle, ModelScorer, TransferMode};
use mmrec::user_encoder::UserEncoderConfig;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn model_config(vocab: usize, l_max: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d: 16,
            n_blocks: 1,
            n_heads: 2,
            vocab_size: vocab,
            p_max: 6,
            q: 4,
            patch_dim: 8,
            trainable_top_blocks: None,
            patch_positions: true,
        },
        user: UserEncoderConfig {
            n_blocks: 1,
            n_heads: 2,
            l_max,
            dropout: 0.0,
        },
    }
}

// ---------------------------------------------------------------- gradients

fn gradient_fidelity() -> Check {
    let t0 = Instant::now();
    let reports = run_loss_suite(&SuiteConfig::default()).map_err(e)?;
    let secs = t0.elapsed().as_secs_f64();
    let mut worst = 0.0f64;
    for (name, r) in &reports {
        ensure(r.pass(), || format!("{name}: max rel err {:.3e} at {:?}", r.max_rel_err(), r.worst()))?;
        worst = worst.max(r.max_rel_err());
    }
    let names: Vec<&str> = reports.iter().map(|(n, _)| n.as_str()).collect();
    ensure(names == ["dap", "vcl", "icl", "nicl", "nid", "rcl", "total"], || format!("losses {names:?}"))?;
    ensure(secs <= 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("7 losses, max rel err {worst:.2e} <= 1e-4, {secs:.1} s"))
}

// ------------------------------------------------------------- closed forms

fn scalar(g: &Graph<f64>, id: mmrec::diffcore::NodeId) -> f64 {
    g.value(id).item().unwrap()
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
}

fn closed_forms() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let seqs = vec![vec![7, 2, 9, 4, 1]];
    let layout = BatchLayout::new(&seqs).map_err(e)?;
    let mut g = Graph::new();
    let h = g.constant(random_tensor(&[1, 5, 6], &mut rng));
    let reps = g.constant(random_tensor(&[5, 6], &mut rng));
    let t = g.constant(random_tensor(&[5, 6], &mut rng));
    let v = g.constant(random_tensor(&[5, 6], &mut rng));
    let dap = dap_loss(&mut g, h, reps, &layout, 1.0).map_err(e)?;
    ensure(scalar(&g, dap) == 0.0, || format!("B=1 DAP = {}", scalar(&g, dap)))?;
    let vcl = contrastive_loss(&mut g, ContrastiveVariant::Vcl, t, v, &layout, 1.0).map_err(e)?;
    ensure(scalar(&g, vcl).abs() == 0.0, || format!("B=1 VCL = {}", scalar(&g, vcl)))?;
    let h2 = g.constant(random_tensor(&[1, 5, 6], &mut rng));
    let rcl = rcl_loss(&mut g, h, h2, &layout.mask, Pooling::Mean, 1.0).map_err(e)?;
    ensure(scalar(&g, rcl).abs() == 0.0, || format!("B=1 RCL = {}", scalar(&g, rcl)))?;

    let same = g.constant(Tensor::filled(&[5, 6], -0.4));
    let nicl = contrastive_loss(&mut g, ContrastiveVariant::Nicl, same, same, &layout, 1.0).map_err(e)?;
    let nicl_err = (scalar(&g, nicl) + 3f64.ln()).abs();
    ensure(nicl_err <= 1e-9, || format!("equal-embedding NICL off -ln 3 by {nicl_err:.3e}"))?;

    let w = g.constant(Tensor::zeros(&[6, 3]));
    let b = g.constant(Tensor::zeros(&[3]));
    let labels = [NoiseLabel::Unchanged, NoiseLabel::Replaced, NoiseLabel::Shuffled, NoiseLabel::Shuffled, NoiseLabel::Unchanged];
    let nid = nid_loss(&mut g, h, &labels, &layout.mask, w, b).map_err(e)?;
    let nid_err = (scalar(&g, nid) - 3f64.ln()).abs();
    ensure(nid_err <= 1e-9, || format!("zero-weight NID off ln 3 by {nid_err:.3e}"))?;

    // every anchor of a user sees the same negatives: other users' items not in its own sequence
    let seqs = vec![vec![0, 1, 2, 3], vec![3, 4, 4], vec![5, 0, 6], vec![7, 8]];
    let layout = BatchLayout::new(&seqs).map_err(e)?;
    let mut g = Graph::new();
    let h = g.constant(Tensor::filled(&[4, 4, 5], 0.3));
    let reps = g.constant(Tensor::filled(&[layout.n_unique(), 5], 0.9));
    let dap = dap_loss(&mut g, h, reps, &layout, 1.0).map_err(e)?;
    let mut want = 0.0;
    let mut n = 0;
    for (u, s) in seqs.iter().enumerate() {
        let negs = seqs
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != u)
            .flat_map(|(_, o)| o.iter())
            .filter(|i| !s.contains(i))
            .count();
        want += (s.len() - 1) as f64 * ((negs + 1) as f64).ln();
        n += s.len() - 1;
    }
    want /= n as f64;
    let dap_err = (scalar(&g, dap) - want).abs();
    ensure(dap_err <= 1e-9, || format!("all-equal DAP off ln(|N|+1) by {dap_err:.3e}"))?;
    Ok(format!(
        "B=1 DAP/VCL/RCL = 0; NICL +ln3 {nicl_err:.1e}; NID -ln3 {nid_err:.1e}; DAP -ln(|N|+1) {dap_err:.1e}"
    ))
}

// ------------------------------------------------------------------ metrics

struct TableScorer {
    rows: Vec<Vec<f64>>,
    next: usize,
}

impl Scorer for TableScorer {
    fn score(&mut self, prefixes: &[&[usize]]) -> mmrec::Result<Vec<Vec<f64>>> {
        let out = self.rows[self.next..self.next + prefixes.len()].to_vec();
        self.next += prefixes.len();
        Ok(out)
    }
}

fn plain_catalog(n: usize) -> Catalog {
    Catalog::new(
        (0..n)
            .map(|i| ItemRecord {
                catalog_index: 3 * i + 1,
                tokens: TokenSequence::new(vec![1]),
                patches: PatchSequence::new(vec![0.0], 1, 1).unwrap(),
            })
            .collect(),
    )
    .unwrap()
}

// rank by sorting the whole catalog, with tied items placed ahead of the target
fn brute_rank(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then((a == target).cmp(&(b == target)))
    });
    order.iter().position(|&i| i == target).unwrap() + 1
}

fn brute_report(ranks: &[usize], k: usize) -> (f64, f64) {
    let mut hits: Vec<usize> = ranks.iter().copied().filter(|r| *r <= k).collect();
    hits.sort();
    let gain: f64 = hits.iter().map(|r| 1.0 / ((*r + 1) as f64).log2()).sum();
    // mean over users first, then scaled to a percentage
    let n = ranks.len() as f64;
    (100.0 * (hits.len() as f64 / n), 100.0 * (gain / n))
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut fixtures = 0;
    let mut ties = 0;
    for &n in &[12usize, 60, 250, 1000] {
        for discrete in [true, false] {
            let catalog = plain_catalog(n);
            let cases: Vec<(Vec<usize>, usize)> = (0..50)
                .map(|_| (vec![catalog.items()[0].catalog_index], catalog.items()[rng.gen_range(0..n)].catalog_index))
                .collect();
            let rows: Vec<Vec<f64>> = (0..50)
                .map(|_| {
                    (0..n)
                        .map(|_| if discrete { rng.gen_range(0..6) as f64 } else { rng.gen_range(-3.0..3.0) })
                        .collect()
                })
                .collect();
            let mut scorer = TableScorer { rows: rows.clone(), next: 0 };
            let ranks = case_ranks(&mut scorer, &catalog, &cases, &EvalOptions::default()).map_err(e)?;
            let report = MetricsReport::from_ranks(&ranks, &[10, 20, 50]).map_err(e)?;
            for (u, (_, target)) in cases.iter().enumerate() {
                let pos = catalog.position(*target).unwrap();
                let want = brute_rank(&rows[u], pos);
                ensure(ranks[u] == want, || format!("n={n} user {u}: rank {} vs brute force {want}", ranks[u]))?;
                if rows[u].iter().enumerate().any(|(i, s)| i != pos && *s == rows[u][pos]) {
                    ties += 1;
                }
            }
            for m in &report.metrics {
                let (hr, ndcg) = brute_report(&ranks, m.k);
                ensure(m.hr == hr && m.ndcg == ndcg, || {
                    format!("n={n} k={}: ({}, {}) vs brute force ({hr}, {ndcg})", m.k, m.hr, m.ndcg)
                })?;
            }
            fixtures += 1;
        }
    }
    Ok(format!("{fixtures} fixtures of 50 users, catalogs 12..1000, {ties} tied targets, all equal"))
}

// --------------------------------------------------------------- corruption

fn corruption_statistics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut draws = 0;
    let users_per_batch = 4;
    while draws < 10_000 {
        // items overlap across users so the replacement pool must exclude them
        let seqs: Vec<Vec<usize>> = (0..users_per_batch)
            .map(|_| {
                let mut s: Vec<usize> = (0..60).collect();
                s.shuffle(&mut rng);
                s.truncate(20);
                s
            })
            .collect();
        let batch = Batch::new((0..users_per_batch).collect(), seqs.clone(), rng.gen()).map_err(e)?;
        for (u, c) in corrupt_batch(&batch, 0.15, 0.05).map_err(e)?.iter().enumerate() {
            let (_, shuffled, replaced) = c.histogram();
            ensure((shuffled, replaced) == (3, 1), || format!("draw {draws}: {shuffled} shuffled, {replaced} replaced"))?;
            for (p, label) in c.labels.iter().enumerate() {
                match label {
                    NoiseLabel::Shuffled => ensure(c.items[p] != seqs[u][p], || format!("draw {draws}: shuffled position {p} kept its item"))?,
                    NoiseLabel::Replaced => ensure(!seqs[u].contains(&c.items[p]), || format!("draw {draws}: replacement {} is in the sequence", c.items[p]))?,
                    _ => ensure(c.items[p] == seqs[u][p], || format!("draw {draws}: unchanged position {p} differs"))?,
                }
            }
            draws += 1;
        }
    }
    Ok(format!("{draws} draws at L=20: always 3 shuffled + 1 replaced, constraints hold"))
}

// ------------------------------------------------------------------ overfit

fn overfit() -> Check {
    let syn = SyntheticConfig {
        n_users: 200,
        n_items: 50,
        target_users: 0,
        target_items: 0,
        l_min: 5,
        l_max: 15,
        vocab_size: 200,
        text_len: 6,
        q: 4,
        patch_dim: 8,
        n_latent_styles: 4,
        transition_noise: 0.0,
        dominant_prob: 1.0,
        zipf_exponent: 1.3,
        patch_noise: 0.5,
        seed: 1,
    };
    let data = generate_synthetic(&syn).map_err(e)?;
    let split = filter_and_split(&data.source, 5).map_err(e)?;
    let catalog = split.catalog().map_err(e)?;
    let model = Model::<f64>::new(model_config(200, 15), ItemRepr::Fused, 1).map_err(e)?;
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        weight_decay: 0.0,
        max_epochs: 200,
        patience: 1000,
        batch_size: 32,
        l_max: 15,
        seed: 1,
        ..TrainConfig::default()
    };
    // every next-item transition inside the training sequences
    let cases: Vec<(Vec<usize>, usize)> = split
        .users
        .iter()
        .flat_map(|u| (1..u.train.len()).map(move |l| (u.train[..l].to_vec(), u.train[l])))
        .collect();
    let t0 = Instant::now();
    let mut reached = None;
    let mut best = 0.0f64;
    train_with_hook(model, &split, &catalog, &cfg, &mut |m, rec| {
        let mut scorer = ModelScorer::new(m, &catalog);
        let ranks = case_ranks(&mut scorer, &catalog, &cases, &EvalOptions::default())?;
        let hr = ranks.iter().filter(|r| **r <= 10).count() as f64 / ranks.len() as f64;
        best = best.max(hr);
        if hr >= 0.90 {
            reached = Some(rec.epoch);
            return Ok(Control::Stop);
        }
        Ok(Control::Continue)
    })
    .map_err(e)?;
    let secs = t0.elapsed().as_secs_f64();
    let epoch = reached.ok_or_else(|| format!("training HR@10 peaked at {best:.3} within 200 epochs"))?;
    ensure(secs <= 600.0, || format!("took {secs:.0} s"))?;
    Ok(format!(
        "training HR@10 {best:.3} >= 0.90 at epoch {epoch} ({} transitions, {} items), {secs:.0} s",
        cases.len(),
        catalog.len()
    ))
}

// ----------------------------------------------------------------- transfer

struct TransferRun {
    full: TrainOutcome<f64>,
    scratch: TrainOutcome<f64>,
    full_test: f64,
    scratch_test: f64,
    target: SplitDataset,
    catalog: Catalog,
}

fn transfer_run(seed: u64) -> Result<TransferRun, String> {
    let syn = SyntheticConfig {
        n_users: 5000,
        n_items: 2000,
        target_users: 500,
        target_items: 600,
        l_min: 5,
        l_max: 10,
        vocab_size: 2000,
        text_len: 6,
        q: 4,
        patch_dim: 8,
        n_latent_styles: 16,
        transition_noise: 0.0,
        dominant_prob: 0.7,
        zipf_exponent: 0.0,
        patch_noise: 2.0,
        seed,
    };
    let data = generate_synthetic(&syn).map_err(e)?;
    let source = filter_and_split(&data.source, 5).map_err(e)?;
    let target = filter_and_split(&data.target, 5).map_err(e)?;
    let scat = source.catalog().map_err(e)?;
    let catalog = target.catalog().map_err(e)?;
    let mc = model_config(2000, 10);
    let pre_cfg = TrainConfig {
        learning_rate: 3e-3,
        weight_decay: 0.0,
        max_epochs: 10,
        patience: 3,
        batch_size: 64,
        l_max: 10,
        seed,
        ..TrainConfig::default()
    };
    let pre = pretrain(Model::<f64>::new(mc.clone(), ItemRepr::Fused, seed).map_err(e)?, &source, &scat, &pre_cfg).map_err(e)?;
    let bundle = parse_bundle::<f64>(&bundle_bytes(&pre.model)).map_err(e)?;
    let ft_cfg = TrainConfig {
        max_epochs: 60,
        patience: 5,
        batch_size: 32,
        ..pre_cfg
    };
    let warm = load_components(&bundle, TransferMode::Full, seed + 100, &mc).map_err(e)?;
    let full = finetune(warm, &target, &catalog, &ft_cfg).map_err(e)?;
    let cold = Model::new(mc, ItemRepr::Fused, seed + 100).map_err(e)?;
    let scratch = finetune(cold, &target, &catalog, &ft_cfg).map_err(e)?;
    let test = |m: &Model<f64>| -> Result<f64, String> {
        let mut s = ModelScorer::new(m, &catalog);
        let r = evaluate(&mut s, &target, &catalog, Phase::Test, &EvalOptions::default()).map_err(e)?;
        Ok(r.hr(10).unwrap())
    };
    Ok(TransferRun {
        full_test: test(&full.model)?,
        scratch_test: test(&scratch.model)?,
        full,
        scratch,
        target,
        catalog,
    })
}

fn transfer_gain(runs: &[TransferRun]) -> Check {
    let n = runs.len() as f64;
    let full = runs.iter().map(|r| r.full_test).sum::<f64>() / n;
    let scratch = runs.iter().map(|r| r.scratch_test).sum::<f64>() / n;
    let per: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.2}/{:.2}", r.full_test, r.scratch_test))
        .collect();
    let detail = format!(
        "test HR@10 full {full:.2} vs scratch {scratch:.2} (x{:.2}); per seed {}",
        full / scratch,
        per.join(" ")
    );
    ensure(full >= 1.10 * scratch, || detail.clone())?;
    Ok(detail)
}

fn convergence_speed(runs: &[TransferRun]) -> Check {
    let mut per = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let goal = r.scratch.log[r.scratch.best_epoch].valid_hr10;
        let scratch_epochs = r.scratch.best_epoch;
        let full_epochs = r.full.log.iter().find(|rec| rec.valid_hr10 >= goal).map(|rec| rec.epoch);
        let msg = format!("seed {}: full reaches {goal:.2} at {full_epochs:?}, scratch at {scratch_epochs}", i + 1);
        ensure(full_epochs.map_or(false, |f| f < scratch_epochs), || msg.clone())?;
        per.push(format!("{}<{}", full_epochs.unwrap(), scratch_epochs));
    }
    Ok(format!("epochs to scratch's best valid HR@10 (full<scratch): {}", per.join(", ")))
}

// ---------------------------------------------------------------- cold start

fn random_split(rng: &mut ChaCha8Rng, n_items: usize, n_users: usize) -> SplitDataset {
    let items = (0..n_items)
        .map(|i| ItemRecord {
            catalog_index: 10 + i,
            tokens: TokenSequence::new(vec![1]),
            patches: PatchSequence::new(vec![0.0], 1, 1).unwrap(),
        })
        .collect();
    let users = (0..n_users)
        .map(|u| {
            let len = rng.gen_range(3..12);
            // skewed popularity so both cold and warm items occur
            let seq: Vec<usize> = (0..len)
                .map(|_| {
                    let x: f64 = rng.gen::<f64>().powi(3);
                    10 + (x * n_items as f64) as usize
                })
                .collect();
            SplitUser {
                user_id: format!("u{u}"),
                train: seq[..len - 2].to_vec(),
                valid: seq[len - 2],
                test: seq[len - 1],
            }
        })
        .collect();
    SplitDataset { items, users }
}

fn brute_cold(split: &SplitDataset, threshold: usize) -> Vec<(usize, Vec<usize>, usize)> {
    let mut out = Vec::new();
    for (u, user) in split.users.iter().enumerate() {
        let full = user.full();
        for p in 1..full.len() {
            let count = split
                .users
                .iter()
                .map(|v| v.train.iter().filter(|i| **i == full[p]).count())
                .sum::<usize>();
            if count < threshold {
                out.push((u, full[..p].to_vec(), full[p]));
            }
        }
    }
    out
}

fn cold_start(run: &TransferRun) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cases = 0;
    for f in 0..40 {
        let (n_items, n_users) = (rng.gen_range(5..80), rng.gen_range(1..40));
        let split = random_split(&mut rng, n_items, n_users);
        for threshold in [0, 1, 3, 10, 1000] {
            let mut got: Vec<(usize, Vec<usize>, usize)> = cold_item_subsequences(&split, threshold)
                .into_iter()
                .map(|c| (c.user, c.prefix, c.target))
                .collect();
            let mut want = brute_cold(&split, threshold);
            got.sort();
            want.sort();
            ensure(got == want, || format!("fixture {f} threshold {threshold}: {} vs {} cases", got.len(), want.len()))?;
            cases += want.len();
        }
    }
    let opts = EvalOptions::default();
    let mut scorer = ModelScorer::new(&run.full.model, &run.catalog);
    let model = evaluate_cold_start(&mut scorer, &run.target, &run.catalog, 10, &opts).map_err(e)?;
    let mut random = RandomScorer::new(run.catalog.len(), 99);
    let base = evaluate_cold_start(&mut random, &run.target, &run.catalog, 10, &opts).map_err(e)?;
    let (m, b) = (model.hr(10).unwrap(), base.hr(10).unwrap());
    let detail = format!(
        "extraction matches brute force ({cases} cases over 40 fixtures); cold HR@10 model {m:.2} vs random {b:.2} on {} cases",
        model.count
    );
    ensure(model.count > 0 && m > b, || detail.clone())?;
    Ok(detail)
}

// --------------------------------------------------------------- versatility

fn small_transfer_data() -> Result<(SplitDataset, SplitDataset), String> {
    let syn = SyntheticConfig {
        n_users: 600,
        n_items: 120,
        target_users: 200,
        target_items: 80,
        l_min: 5,
        l_max: 10,
        vocab_size: 300,
        text_len: 6,
        q: 4,
        patch_dim: 8,
        n_latent_styles: 4,
        transition_noise: 0.1,
        dominant_prob: 0.8,
        zipf_exponent: 0.5,
        patch_noise: 1.0,
        seed: 7,
    };
    let data = generate_synthetic(&syn).map_err(e)?;
    Ok((
        filter_and_split(&data.source, 5).map_err(e)?,
        filter_and_split(&data.target, 5).map_err(e)?,
    ))
}

fn logit_bits(model: &Model<f64>, catalog: &Catalog, prefixes: &[&[usize]]) -> Result<Vec<u64>, String> {
    let index = build_item_index(model, catalog).map_err(e)?;
    let logits = score_logits(model, &index, catalog, prefixes).map_err(e)?;
    Ok(logits.iter().flatten().map(|v| v.to_bits()).collect())
}

fn all_scores(model: &Model<f64>, catalog: &Catalog, split: &SplitDataset) -> Result<Vec<u64>, String> {
    let cases = split_cases(split, Phase::Test);
    let prefixes: Vec<&[usize]> = cases.iter().map(|(p, _)| p.as_slice()).collect();
    logit_bits(model, catalog, &prefixes)
}

fn versatility() -> Check {
    let (source, target) = small_transfer_data()?;
    let scat = source.catalog().map_err(e)?;
    let tcat = target.catalog().map_err(e)?;
    let mc = model_config(300, 10);
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        weight_decay: 0.0,
        max_epochs: 3,
        patience: 3,
        batch_size: 32,
        l_max: 10,
        seed: 4,
        ..TrainConfig::default()
    };
    let pre = pretrain(Model::<f64>::new(mc.clone(), ItemRepr::Fused, 4).map_err(e)?, &source, &scat, &cfg).map_err(e)?;
    let bytes = bundle_bytes(&pre.model);
    let bundle = parse_bundle::<f64>(&bytes).map_err(e)?;
    let mut results = Vec::new();
    for mode in TransferMode::ALL {
        let model = load_components(&bundle, mode, 40, &mc).map_err(|err| format!("{mode}: {err}"))?;
        let tuned = finetune(model, &target, &tcat, &cfg).map_err(|err| format!("{mode}: {err}"))?;
        let mut scorer = ModelScorer::new(&tuned.model, &tcat);
        let rep = evaluate(&mut scorer, &target, &tcat, Phase::Test, &EvalOptions::default())
            .map_err(|err| format!("{mode}: {err}"))?;
        let hr = rep.hr(10).unwrap();
        ensure(hr.is_finite() && rep.count > 0, || format!("{mode}: HR@10 {hr}"))?;
        results.push(format!("{mode} {hr:.1}"));
    }

    // perturb every vision and fusion tensor, re-serialize, fine-tune text_only from both
    let mut noisy = pre.model.clone();
    let names: Vec<String> = noisy
        .params
        .names()
        .filter(|n| n.starts_with("vision_encoder.") || n.starts_with("fusion."))
        .cloned()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in &names {
        for v in noisy.params.get_mut(n).unwrap().data_mut() {
            *v += rng.gen_range(-1.0..1.0);
        }
    }
    let noisy_bytes = bundle_bytes(&noisy);
    ensure(noisy_bytes != bytes, || "perturbation left the bundle unchanged".into())?;
    let text_only = |raw: &[u8]| -> Result<(Vec<u64>, Vec<u8>), String> {
        let b = parse_bundle::<f64>(raw).map_err(e)?;
        let m = load_components(&b, TransferMode::TextOnly, 40, &mc).map_err(e)?;
        let before = all_scores(&m, &tcat, &target)?;
        let tuned = finetune(m, &target, &tcat, &cfg).map_err(e)?;
        let mut scores = before;
        scores.extend(all_scores(&tuned.model, &tcat, &target)?);
        Ok((scores, bundle_bytes(&tuned.model)))
    };
    let (a, ab) = text_only(&bytes)?;
    let (b, bb) = text_only(&noisy_bytes)?;
    ensure(a == b && ab == bb, || "text_only predictions changed with vision/fusion weights".into())?;
    Ok(format!(
        "all five modes fine-tune and evaluate (test HR@10: {}); text_only bit-invariant to {} perturbed tensors",
        results.join(", "),
        names.len()
    ))
}

// -------------------------------------------------------------- checkpoints

fn checkpoint_integrity() -> Check {
    let mc = model_config(50, 8);
    let mut model = Model::<f64>::new(mc, ItemRepr::Fused, 12).map_err(e)?;
    jitter(&mut model, 0.1, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let catalog = Catalog::new(
        (0..30)
            .map(|i| ItemRecord {
                catalog_index: i,
                tokens: TokenSequence::new((0..rng.gen_range(1..9)).map(|_| rng.gen_range(1..50)).collect()),
                patches: PatchSequence::new((0..32).map(|_| rng.gen_range(-1.0..1.0)).collect(), 4, 8).unwrap(),
            })
            .collect(),
    )
    .map_err(e)?;
    let prefixes: Vec<Vec<usize>> = (0..12).map(|k| (0..1 + k % 8).map(|_| rng.gen_range(0..30)).collect()).collect();
    let refs: Vec<&[usize]> = prefixes.iter().map(|p| p.as_slice()).collect();
    let dir = tempfile::tempdir().map_err(e)?;
    let path = dir.path().join("model.ckpt");
    save_bundle(&model, &path).map_err(e)?;
    let back = load_model::<f64>(&path).map_err(e)?;
    let bits = |m: &Model<f64>| -> Result<Vec<u64>, String> {
        logit_bits(m, &catalog, &refs)
    };
    ensure(bits(&model)? == bits(&back)?, || "forward pass differs after reload".into())?;
    let raw = fs::read(&path).map_err(e)?;
    ensure(bundle_bytes(&back) == raw, || "re-serialized bundle differs".into())?;

    let mut probes = vec![0, 8, 12, 20, raw.len() / 3, raw.len() / 2, raw.len() - 40, raw.len() - 1];
    probes.extend((0..20).map(|_| rng.gen_range(0..raw.len())));
    for &at in &probes {
        let mut bad = raw.clone();
        bad[at] ^= 0x10;
        ensure(parse_bundle::<f64>(&bad).is_err(), || format!("byte {at} flipped, still accepted"))?;
    }
    for cut in [0, 7, 20, raw.len() / 2, raw.len() - 1] {
        ensure(parse_bundle::<f64>(&raw[..cut]).is_err(), || format!("truncated to {cut} bytes, still accepted"))?;
    }
    let mut longer = raw.clone();
    longer.push(0);
    ensure(parse_bundle::<f64>(&longer).is_err(), || "trailing byte accepted".into())?;
    Ok(format!(
        "reload forward pass bit-exact over {} scores; {} corrupted variants rejected",
        refs.len() * catalog.len(),
        probes.len() + 6
    ))
}

// -------------------------------------------------------------- determinism

fn mmrec(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mmrec"))
        .args(args)
        .current_dir(dir)
        .env_remove("MMREC_SEED")
        .output()
        .map_err(e)?;
    ensure(out.status.success(), || {
        format!("mmrec {args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn determinism() -> Check {
    let root = tempfile::tempdir().map_err(e)?;
    let conf = root.path().join("run.conf");
    fs::write(
        &conf,
        "seed = 5\nthreads = 1\nn_users = 300\nn_items = 60\ntarget_users = 120\ntarget_items = 40\n\
         seq_max = 10\nl_max = 10\nvocab_size = 200\nq = 4\npatch_dim = 8\np_max = 6\n\
         max_epochs = 3\nbatch_size = 32\ngc_d = 4\ngc_len = 3\ngc_p_max = 2\ngc_q = 2\n",
    )
    .map_err(e)?;
    let conf = conf.to_str().unwrap().to_string();
    let src = ["items=data/source.items.tsv", "interactions=data/source.interactions.tsv"];
    let tgt = ["items=data/target.items.tsv", "interactions=data/target.interactions.tsv"];
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("gen-data", vec!["out_dir=data"]),
        ("stats", src.to_vec()),
        ("pretrain", src.to_vec()),
        ("finetune", [&tgt[..], &["checkpoint=pretrain.ckpt"]].concat()),
        ("finetune", [&tgt[..], &["checkpoint=pretrain.ckpt", "mode=vision_only", "out_dir=vision"]].concat()),
        ("evaluate", [&tgt[..], &["checkpoint=finetune.ckpt"]].concat()),
        ("cold-eval", [&tgt[..], &["checkpoint=finetune.ckpt"]].concat()),
        ("grad-check", vec![]),
    ];
    let mut trees = Vec::new();
    for rep in ["a", "b"] {
        let dir = root.path().join(rep);
        fs::create_dir_all(&dir).map_err(e)?;
        for (cmd, extra) in &runs {
            let mut args = vec![*cmd, "-c", conf.as_str()];
            // outputs land in the working directory unless a run says otherwise
            if !extra.iter().any(|a| a.starts_with("out_dir=")) {
                args.push("out_dir=.");
            }
            args.extend(extra.iter().copied());
            mmrec(&dir, &args)?;
        }
        trees.push(collect(&dir)?);
    }
    let (a, b) = (&trees[0], &trees[1]);
    ensure(a.keys().eq(b.keys()), || "runs wrote different file sets".into())?;
    let mut ckpts = 0;
    let mut logs = 0;
    for (name, bytes) in a {
        if name.ends_with("timing.json") {
            continue;
        }
        let other = &b[name];
        if name.ends_with(".jsonl") {
            let parse = |raw: &[u8]| -> Vec<serde_json::Value> {
                String::from_utf8_lossy(raw).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
            };
            ensure(parse(bytes) == parse(other), || format!("{name}: log values differ"))?;
            logs += 1;
        } else {
            ensure(bytes == other, || format!("{name}: bytes differ"))?;
            ckpts += name.ends_with(".ckpt") as usize;
        }
    }
    Ok(format!(
        "{} commands run twice: {} files compared, {ckpts} checkpoints byte-identical, {logs} logs value-identical",
        runs.len(),
        a.len()
    ))
}

fn collect(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(e)? {
            let p = entry.map_err(e)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).map_err(e)?);
            }
        }
    }
    Ok(out)
}

// --------------------------------------------------------------------- main

fn main() {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, t0: Instant, r: Check| {
        let secs = t0.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("PASS [{id:02}] {name}: {detail} ({secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{id:02}] {name}: {detail} ({secs:.1} s)");
            }
        }
    };
    let t = Instant::now();
    report(1, "gradient fidelity", t, gradient_fidelity());
    let t = Instant::now();
    report(2, "closed-form losses", t, closed_forms());
    let t = Instant::now();
    report(3, "metric oracle", t, metric_oracle());
    let t = Instant::now();
    report(4, "corruption statistics", t, corruption_statistics());
    let t = Instant::now();
    report(5, "overfit", t, overfit());

    let t = Instant::now();
    let runs: Result<Vec<TransferRun>, String> = (1..=3).map(transfer_run).collect();
    let shared: HashMap<u32, Check> = match &runs {
        Ok(runs) => [(6, transfer_gain(runs)), (8, convergence_speed(runs)), (10, cold_start(&runs[0]))].into(),
        Err(err) => [6, 8, 10].map(|id| (id, Err(format!("transfer runs failed: {err}")))).into(),
    };
    let mut shared = shared;
    report(6, "transfer gain", t, shared.remove(&6).unwrap());
    let t2 = Instant::now();
    report(7, "transfer modes", t2, versatility());
    report(8, "convergence speed", t, shared.remove(&8).unwrap());
    let t2 = Instant::now();
    report(9, "checkpoint integrity", t2, checkpoint_integrity());
    report(10, "cold start", t, shared.remove(&10).unwrap());
    let t = Instant::now();
    report(11, "determinism", t, determinism());

    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
    println!("all 11 acceptance checks passed");
}
