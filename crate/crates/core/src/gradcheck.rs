//! Central-difference checks of parameter gradients for whole-model losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Catalog, ItemRecord};
use crate::diffcore::{rel_err, NodeId};
use crate::encoders::{EncoderConfig, PatchSequence, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{ItemRepr, Model, ModelConfig};
use crate::objectives::{total_loss, Batch, ContrastiveVariant, ObjectiveConfig};
use crate::params::Session;
use crate::rng::{derive_seed, rng_for};
use crate::scalar::Scalar;
use crate::user_encoder::UserEncoderConfig;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub size: usize,
    pub max_rel_err: f64,
    pub worst: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelGradCheck {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl ModelGradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn pass(&self) -> bool {
        !self.params.is_empty() && self.max_rel_err() <= self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn loss_value<T: Scalar, F>(model: &Model<T>, loss: &F) -> Result<f64>
where
    F: Fn(&mut Session<'_, T>, &Model<T>) -> Result<NodeId>,
{
    let mut s = model.session();
    let root = loss(&mut s, model)?;
    s.g.value(root)
        .item()
        .map(|v| v.f64())
        .ok_or_else(|| Error::NonScalar(root.index(), s.g.shape(root).to_vec()))
}

/// Checks the analytic gradient of every trainable parameter that `loss`
/// touches against central differences. Untouched parameters have an
/// exactly zero gradient by construction and are not perturbed.
pub fn check_model_gradients<T: Scalar, F>(model: &Model<T>, loss: F, step: f64, tol: f64) -> Result<ModelGradCheck>
where
    F: Fn(&mut Session<'_, T>, &Model<T>) -> Result<NodeId>,
{
    if !(step > 0.0) || !(tol > 0.0) {
        return Err(Error::invalid(format!(
            "gradient check needs step > 0 and tol > 0 (got {} / {})",
            step, tol
        )));
    }
    let analytic = {
        let mut s = model.session();
        let root = loss(&mut s, model)?;
        let grads = s.g.backward(root)?;
        s.param_grads(&grads)
    };
    let mut work = model.clone();
    let mut params = Vec::with_capacity(analytic.len());
    for (name, grad) in &analytic {
        let mut worst = (0.0f64, 0usize);
        for j in 0..grad.len() {
            let orig = work.params.get(name).expect("bound parameter").data()[j];
            let set = |m: &mut Model<T>, v: T| m.params.get_mut(name).expect("bound parameter").data_mut()[j] = v;
            set(&mut work, T::of(orig.f64() + step));
            let plus = loss_value(&work, &loss)?;
            set(&mut work, T::of(orig.f64() - step));
            let minus = loss_value(&work, &loss)?;
            set(&mut work, orig);
            let e = rel_err(grad.data()[j].f64(), (plus - minus) / (2.0 * step));
            let e = if e.is_nan() { f64::INFINITY } else { e };
            if e > worst.0 {
                worst = (e, j);
            }
        }
        params.push(ParamCheck {
            name: name.clone(),
            size: grad.len(),
            max_rel_err: worst.0,
            worst: worst.1,
        });
    }
    Ok(ModelGradCheck { params, tol })
}

/// Adds `N(0, std²)` noise to every parameter so a check does not run at
/// the near-linear regime of a fresh initialization.
pub fn jitter<T: Scalar>(model: &mut Model<T>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in names {
        let t = model.params.get_mut(&name).expect("listed name");
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = T::of(v.f64() + std * z);
        }
    }
}

/// Shape of the finite-difference suite run over every objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub batch: usize,
    pub len: usize,
    pub d: usize,
    pub p_max: usize,
    pub q: usize,
    pub step: f64,
    pub tol: f64,
    /// std of the noise added to the fresh initialization
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            batch: 2,
            len: 4,
            d: 8,
            p_max: 4,
            q: 4,
            step: 1e-5,
            tol: 1e-4,
            jitter: 0.2,
            seed: 0,
        }
    }
}

const SUITE_VOCAB: usize = 12;
const SUITE_PATCH_DIM: usize = 3;

impl SuiteConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d: self.d,
                n_blocks: 1,
                n_heads: 2,
                vocab_size: SUITE_VOCAB,
                p_max: self.p_max,
                q: self.q,
                patch_dim: SUITE_PATCH_DIM,
                trainable_top_blocks: None,
                patch_positions: true,
            },
            user: UserEncoderConfig {
                n_blocks: 1,
                n_heads: 2,
                l_max: self.len,
                dropout: 0.0,
            },
        }
    }

    /// `batch` users with `len` distinct items each, drawn from a random
    /// catalog of `batch * len` items.
    pub fn fixture(&self) -> Result<(Catalog, Batch)> {
        if self.batch == 0 || self.len < 2 {
            return Err(Error::invalid(format!(
                "gradient suite needs batch >= 1 and len >= 2 (got {} / {})",
                self.batch, self.len
            )));
        }
        let mut rng = rng_for(self.seed, "gradcheck-fixture");
        let n = self.batch * self.len;
        let items = (0..n)
            .map(|i| {
                let len = rng.gen_range(1..=self.p_max + 1);
                let values = (0..self.q * SUITE_PATCH_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Ok(ItemRecord {
                    catalog_index: i,
                    tokens: TokenSequence::new((0..len).map(|_| rng.gen_range(1..SUITE_VOCAB)).collect()),
                    patches: PatchSequence::new(values, self.q, SUITE_PATCH_DIM)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let sequences = (0..self.batch)
            .map(|u| (u * self.len..(u + 1) * self.len).collect())
            .collect();
        let batch = Batch::new((0..self.batch).collect(), sequences, derive_seed(self.seed, "gradcheck-batch"))?;
        Ok((Catalog::new(items)?, batch))
    }
}

/// Objective sets checked by [`run_loss_suite`], each alone and then all
/// together.
pub fn suite_objectives() -> Vec<(&'static str, ObjectiveConfig)> {
    let none = ObjectiveConfig {
        dap: false,
        contrastive: None,
        nid: false,
        rcl: false,
        ..ObjectiveConfig::pretrain()
    };
    let contrast = |v| ObjectiveConfig {
        contrastive: Some(v),
        ..none.clone()
    };
    vec![
        ("dap", ObjectiveConfig { dap: true, ..none.clone() }),
        ("vcl", contrast(ContrastiveVariant::Vcl)),
        ("icl", contrast(ContrastiveVariant::Icl)),
        ("nicl", contrast(ContrastiveVariant::Nicl)),
        ("nid", ObjectiveConfig { nid: true, ..none.clone() }),
        ("rcl", ObjectiveConfig { rcl: true, ..none.clone() }),
        ("total", ObjectiveConfig::pretrain()),
    ]
}

/// Gradient check of every objective with respect to every parameter it
/// reaches, on a jittered fused model.
pub fn run_loss_suite(cfg: &SuiteConfig) -> Result<Vec<(String, ModelGradCheck)>> {
    let mut model = Model::<f64>::new(cfg.model_config(), ItemRepr::Fused, derive_seed(cfg.seed, "gradcheck-init"))?;
    jitter(&mut model, cfg.jitter, derive_seed(cfg.seed, "gradcheck-jitter"));
    let (catalog, batch) = cfg.fixture()?;
    suite_objectives()
        .into_iter()
        .map(|(name, obj)| {
            let report = check_model_gradients(
                &model,
                |s, m| Ok(total_loss(s, m, &batch, &catalog, &obj)?.total),
                cfg.step,
                cfg.tol,
            )?;
            Ok((name.to_string(), report))
        })
        .collect()
}
