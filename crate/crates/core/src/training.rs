//! AdamW, the multi-objective pre-training loop, DAP-only fine-tuning and
//! early stopping on validation HR@10.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Catalog, SplitDataset};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, Phase};
use crate::model::Model;
use crate::objectives::{total_loss, LossBreakdown, ObjectiveConfig};
use crate::params::ParamSet;
use crate::rng::{derive_seed, derive_seed_n, rng_for};
use crate::scalar::Scalar;
use crate::transfer::ModelScorer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub l_max: usize,
    pub seed: u64,
    pub objectives: ObjectiveConfig,
    pub trainable_top_blocks: Option<usize>,
    /// Global-norm clipping threshold.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 500,
            patience: 10,
            batch_size: 16,
            l_max: 20,
            seed: 0,
            objectives: ObjectiveConfig::pretrain(),
            trainable_top_blocks: None,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| {
            Err(Error::Config {
                key: key.into(),
                detail,
            })
        };
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate", format!("{} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("{} must be >= 0", self.weight_decay));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(k, format!("{} outside [0, 1)", v));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", format!("{} must be positive", self.adam_eps));
        }
        if self.patience < 1 {
            return bad("patience", "must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be at least 1".into());
        }
        let o = &self.objectives;
        if self.batch_size < 2 && (o.contrastive.is_some() || o.rcl) {
            return bad("batch_size", "contrastive objectives need at least 2 users per batch".into());
        }
        if self.l_max < 2 {
            return bad("l_max", "must be at least 2".into());
        }
        if !(0.0..1.0).contains(&o.shuffle_rate) || !(0.0..1.0).contains(&o.replace_rate) {
            return bad("shuffle_rate", "corruption rates must lie in [0, 1)".into());
        }
        if !(o.temperature > 0.0) {
            return bad("temperature", format!("{} must be positive", o.temperature));
        }
        if !o.dap && o.contrastive.is_none() && !o.nid && !o.rcl {
            return bad("objectives", "at least one objective must be enabled".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip", format!("{} must be positive", c));
            }
        }
        Ok(())
    }
}

/// Per-parameter AdamW moments.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<T: Scalar> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

/// One AdamW update with decoupled weight decay:
/// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`. Only parameters present in `grads`
/// move. A non-finite gradient rejects the whole step and leaves `params`
/// and `state` untouched.
pub fn optimizer_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {}", name)))?;
        if p.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient shape {:?} for {} of shape {:?}",
                g.shape(),
                name,
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let scale = match cfg.grad_clip {
        Some(c) => {
            let norm: f64 = grads
                .values()
                .flat_map(|g| g.data().iter().map(|v| v.f64() * v.f64()))
                .sum::<f64>()
                .sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, wd, eps) = (cfg.learning_rate, cfg.weight_decay, cfg.adam_eps);
    for (name, g) in grads {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let p = params.get_mut(name).expect("checked above");
        for i in 0..g.len() {
            let gi = g.data()[i].f64() * scale;
            let mi = b1 * m.data()[i].f64() + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i].f64() + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = T::of(mi);
            v.data_mut()[i] = T::of(vi);
            let pi = p.data()[i].f64();
            let upd = lr * (mi / c1) / ((vi / c2).sqrt() + eps) + lr * wd * pi;
            p.data_mut()[i] = T::of(pi - upd);
        }
    }
    Ok(())
}

/// True once `patience` epochs have passed without beating the best value.
/// Ties keep the earlier epoch as the best.
pub fn should_stop(history: &[f64], patience: usize) -> Result<bool> {
    if patience < 1 {
        return Err(Error::invalid("patience must be at least 1"));
    }
    if history.is_empty() {
        return Err(Error::invalid("empty validation history"));
    }
    let best = best_epoch(history);
    Ok(history.len() - 1 - best >= patience)
}

fn best_epoch(history: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in history.iter().enumerate() {
        if *v > history[best] {
            best = i;
        }
    }
    best
}

/// One line of the training log. Epoch 0 is the evaluation before any
/// update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: Option<LossBreakdown>,
    pub valid_hr10: f64,
    pub valid_ndcg10: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    /// Parameters from the best validation epoch.
    pub model: Model<T>,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// What an epoch hook wants the loop to do next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

fn mean_breakdown(parts: &[LossBreakdown]) -> Option<LossBreakdown> {
    if parts.is_empty() {
        return None;
    }
    let n = parts.len() as f64;
    let avg = |f: &dyn Fn(&LossBreakdown) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = parts.iter().map(f).collect();
        v.map(|v| v.iter().sum::<f64>() / n)
    };
    Some(LossBreakdown {
        dap: avg(&|b| b.dap),
        contrastive: avg(&|b| b.contrastive),
        nid: avg(&|b| b.nid),
        rcl: avg(&|b| b.rcl),
        total: parts.iter().map(|b| b.total).sum::<f64>() / n,
    })
}

fn validate_hr<T: Scalar>(model: &Model<T>, split: &SplitDataset, catalog: &Catalog) -> Result<(f64, f64)> {
    let mut scorer = ModelScorer::new(model, catalog);
    let r = evaluate(&mut scorer, split, catalog, Phase::Valid, &EvalOptions::default())?;
    Ok((r.hr(10).unwrap_or(0.0), r.ndcg(10).unwrap_or(0.0)))
}

/// The shared loop: evaluate, then per epoch run every seeded batch through
/// `cfg.objectives`, step AdamW, re-evaluate, keep the best snapshot, and
/// stop on patience, `max_epochs` or the hook's request.
pub fn train_with_hook<T: Scalar>(
    mut model: Model<T>,
    split: &SplitDataset,
    catalog: &Catalog,
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(&Model<T>, &EpochRecord) -> Result<Control>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if split.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if cfg.l_max > model.config.user.l_max {
        return Err(Error::Config {
            key: "l_max".into(),
            detail: format!("{} exceeds the user encoder window {}", cfg.l_max, model.config.user.l_max),
        });
    }
    if cfg.trainable_top_blocks.is_some() {
        model.set_trainable_top_blocks(cfg.trainable_top_blocks)?;
    }
    let (hr, ndcg) = validate_hr(&model, split, catalog)?;
    let first = EpochRecord {
        epoch: 0,
        steps: 0,
        loss: None,
        valid_hr10: hr,
        valid_ndcg10: ndcg,
    };
    let mut history = vec![hr];
    let mut best = (0, model.params.clone());
    let mut log = vec![first.clone()];
    let mut state = OptimizerState::default();
    let mut stop = hook(&model, &first)? == Control::Stop;

    let mut epoch = 0;
    while !stop && epoch < cfg.max_epochs {
        epoch += 1;
        let batches = make_batches(split, cfg.batch_size, cfg.l_max, derive_seed_n(cfg.seed, "epoch", epoch as u64))?;
        let mut parts = Vec::with_capacity(batches.len());
        for (k, batch) in batches.iter().enumerate() {
            let (grads, breakdown) = {
                let mut s = model.session();
                if model.config.user.dropout > 0.0 {
                    let seed = derive_seed_n(derive_seed(cfg.seed, "dropout"), "epoch", epoch as u64);
                    s = s.with_dropout(rng_for(seed, &k.to_string()));
                }
                let out = total_loss(&mut s, &model, batch, catalog, &cfg.objectives)?;
                let g = s.g.backward(out.total)?;
                (s.param_grads(&g), out.breakdown)
            };
            optimizer_step(&mut model.params, &grads, &mut state, cfg)?;
            parts.push(breakdown);
        }
        let (hr, ndcg) = validate_hr(&model, split, catalog)?;
        let rec = EpochRecord {
            epoch,
            steps: state.step as usize,
            loss: mean_breakdown(&parts),
            valid_hr10: hr,
            valid_ndcg10: ndcg,
        };
        history.push(hr);
        if best_epoch(&history) == epoch {
            best = (epoch, model.params.clone());
        }
        log.push(rec.clone());
        stop = hook(&model, &rec)? == Control::Stop || should_stop(&history, cfg.patience)?;
    }
    let config = model.config.clone();
    let mut best_model = Model::from_params(config, model.repr, best.1)?;
    best_model.set_trainable_top_blocks(model.config.encoder.trainable_top_blocks)?;
    Ok(TrainOutcome {
        model: best_model,
        best_epoch: best.0,
        log,
    })
}

/// Multi-objective pre-training with the configured objectives.
pub fn pretrain<T: Scalar>(
    model: Model<T>,
    split: &SplitDataset,
    catalog: &Catalog,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with_hook(model, split, catalog, cfg, &mut |_, _| Ok(Control::Continue))
}

/// DAP-only training of a model already assembled for a transfer mode.
pub fn finetune<T: Scalar>(
    model: Model<T>,
    split: &SplitDataset,
    catalog: &Catalog,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let cfg = TrainConfig {
        objectives: ObjectiveConfig {
            temperature: cfg.objectives.temperature,
            ..ObjectiveConfig::finetune()
        },
        ..cfg.clone()
    };
    train_with_hook(model, split, catalog, &cfg, &mut |_, _| Ok(Control::Continue))
}
