//! The full recommender: item encoders, fusion, user encoder and NID head
//! stored in one [`ParamSet`], grouped by component.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::ItemRecord;
use crate::diffcore::NodeId;
use crate::encoders::{
    encode_text, encode_vision, frozen_encoder_params, fuse, init_fusion, init_text_encoder,
    init_vision_encoder, EncoderConfig, FUSION_GROUP, TEXT_GROUP, VISION_GROUP,
};
use crate::error::{Error, Result};
use crate::params::{Init, ParamSet, Session};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::user_encoder::{init_user_encoder, UserEncoderConfig, USER_GROUP};

pub const NID_GROUP: &str = "nid_head";
pub const NID_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub user: UserEncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.user.validate(self.encoder.d)
    }
}

/// Which vector stands for an item in front of the user encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItemRepr {
    /// fused `e_cls`
    Fused,
    /// text `t_cls`
    Text,
    /// vision `v_cls`
    Vision,
}

impl ItemRepr {
    pub fn groups(self) -> &'static [&'static str] {
        match self {
            ItemRepr::Fused => &[TEXT_GROUP, VISION_GROUP, FUSION_GROUP, USER_GROUP, NID_GROUP],
            ItemRepr::Text => &[TEXT_GROUP, USER_GROUP, NID_GROUP],
            ItemRepr::Vision => &[VISION_GROUP, USER_GROUP, NID_GROUP],
        }
    }

    pub fn has_text(self) -> bool {
        self != ItemRepr::Vision
    }

    pub fn has_vision(self) -> bool {
        self != ItemRepr::Text
    }
}

/// Graph nodes for a batch of encoded items.
#[derive(Clone, Debug)]
pub struct ItemEncodings {
    /// `[n, d]` vectors fed to the user encoder
    pub reps: NodeId,
    pub t_cls: Option<NodeId>,
    pub v_cls: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub repr: ItemRepr,
    pub params: ParamSet<T>,
    frozen: BTreeSet<String>,
}

pub(crate) fn init_group<T: Scalar>(ps: &mut ParamSet<T>, cfg: &ModelConfig, group: &str, seed: u64) {
    let mut rng = rng_for(seed, group);
    match group {
        TEXT_GROUP => init_text_encoder(ps, &cfg.encoder, &mut rng),
        VISION_GROUP => init_vision_encoder(ps, &cfg.encoder, &mut rng),
        FUSION_GROUP => init_fusion(ps, &cfg.encoder, &mut rng),
        USER_GROUP => init_user_encoder(ps, &cfg.user, cfg.encoder.d, &mut rng),
        NID_GROUP => {
            let mut init = Init { rng: &mut rng };
            ps.insert(format!("{NID_GROUP}.w"), init.normal(&[cfg.encoder.d, NID_CLASSES]));
            ps.insert(format!("{NID_GROUP}.b"), init.zeros(&[NID_CLASSES]));
        }
        other => unreachable!("unknown group {other}"),
    }
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized model; each group draws from its own seed stream so
    /// re-initializing one group never perturbs another.
    pub fn new(config: ModelConfig, repr: ItemRepr, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for g in repr.groups() {
            init_group(&mut params, &config, g, seed);
        }
        Self::from_params(config, repr, params)
    }

    pub fn from_params(config: ModelConfig, repr: ItemRepr, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        for g in repr.groups() {
            if *g != NID_GROUP && !params.has_group(g) {
                return Err(Error::MissingGroup(g.to_string()));
            }
        }
        let mut m = Self {
            config,
            repr,
            params,
            frozen: BTreeSet::new(),
        };
        m.refresh_frozen();
        Ok(m)
    }

    fn refresh_frozen(&mut self) {
        self.frozen = frozen_encoder_params(&self.params, &self.config.encoder)
            .into_iter()
            .collect();
    }

    pub fn set_trainable_top_blocks(&mut self, k: Option<usize>) -> Result<()> {
        self.config.encoder.trainable_top_blocks = k;
        self.config.encoder.validate()?;
        self.refresh_frozen();
        Ok(())
    }

    /// Additionally freezes every parameter of `group`.
    pub fn freeze_group(&mut self, group: &str) {
        let names: Vec<String> = self.params.group(group).map(|(k, _)| k.clone()).collect();
        self.frozen.extend(names);
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.contains(name) && !self.frozen.contains(name)
    }

    pub fn session(&self) -> Session<'_, T> {
        Session::new(&self.params, &self.frozen)
    }

    /// Encodes `items` in one batch and returns the representation this
    /// model feeds its user encoder, plus the per-modality cls vectors.
    pub fn encode_items(&self, s: &mut Session<'_, T>, items: &[&ItemRecord]) -> Result<ItemEncodings> {
        let cfg = &self.config.encoder;
        let text = if self.repr.has_text() {
            let toks: Vec<_> = items.iter().map(|i| &i.tokens).collect();
            Some(encode_text(s, cfg, &toks)?)
        } else {
            None
        };
        let vision = if self.repr.has_vision() {
            let patches: Vec<_> = items.iter().map(|i| &i.patches).collect();
            Some(encode_vision(s, cfg, &patches)?)
        } else {
            None
        };
        let reps = match (&text, &vision) {
            (Some(t), Some(v)) => fuse(s, cfg, t, v)?,
            (Some(t), None) => t.cls,
            (None, Some(v)) => v.cls,
            (None, None) => unreachable!(),
        };
        Ok(ItemEncodings {
            reps,
            t_cls: text.map(|t| t.cls),
            v_cls: vision.map(|v| v.cls),
        })
    }
}
