//! Item encoders: a text transformer over token ids, a vision transformer
//! over patch vectors, and the merge-attention fusion block that turns both
//! into one item vector.
//!
//! All three run batched over `n` items at once. Outputs are graph nodes so
//! losses can back-propagate end to end into the encoders.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, Tensor};
use crate::error::{Error, Result};
use crate::layers::{block, init_block, init_layer_norm, init_linear, key_padding_mask, layer_norm};
use crate::params::{Init, ParamSet, Session};
use crate::scalar::Scalar;

pub const PAD_ID: usize = 0;

pub const TEXT_GROUP: &str = "text_encoder";
pub const VISION_GROUP: &str = "vision_encoder";
pub const FUSION_GROUP: &str = "fusion";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub p_max: usize,
    pub q: usize,
    pub patch_dim: usize,
    /// `None` trains every block; `Some(k)` trains only the top `k` blocks of
    /// the text and vision encoders (embeddings and lower blocks frozen).
    pub trainable_top_blocks: Option<usize>,
    /// Learned position table for patches.
    pub patch_positions: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 32,
            n_blocks: 2,
            n_heads: 4,
            vocab_size: 1000,
            p_max: 16,
            q: 16,
            patch_dim: 12,
            trainable_top_blocks: None,
            patch_positions: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d={} must be a positive multiple of n_heads={}",
                self.d, self.n_heads
            )));
        }
        if self.n_blocks == 0 || self.vocab_size < 2 || self.p_max == 0 || self.q == 0 || self.patch_dim == 0 {
            return Err(Error::invalid(
                "n_blocks, p_max, q, patch_dim must be positive and vocab_size >= 2",
            ));
        }
        if let Some(k) = self.trainable_top_blocks {
            if k < 1 || k > self.n_blocks {
                return Err(Error::invalid(format!(
                    "trainable_top_blocks={} outside 1..={}",
                    k, self.n_blocks
                )));
            }
        }
        Ok(())
    }
}

/// Pre-tokenized item text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub token_ids: Vec<usize>,
    /// true = real token
    pub pad_mask: Vec<bool>,
}

impl TokenSequence {
    /// All tokens real.
    pub fn new(token_ids: Vec<usize>) -> Self {
        let pad_mask = vec![true; token_ids.len()];
        Self { token_ids, pad_mask }
    }

    pub fn with_mask(token_ids: Vec<usize>, pad_mask: Vec<bool>) -> Result<Self> {
        if token_ids.len() != pad_mask.len() {
            return Err(Error::invalid("token ids and pad mask differ in length"));
        }
        Ok(Self { token_ids, pad_mask })
    }

    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().filter(|m| **m).count()
    }

    /// Real token ids in order.
    pub fn real_tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.token_ids
            .iter()
            .zip(&self.pad_mask)
            .filter(|(_, m)| **m)
            .map(|(t, _)| *t)
    }
}

/// An item image already cut into `q` patch vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    /// Row-major `q × patch_dim`.
    pub values: Vec<f64>,
    pub q: usize,
    pub patch_dim: usize,
}

impl PatchSequence {
    pub fn new(values: Vec<f64>, q: usize, patch_dim: usize) -> Result<Self> {
        if values.len() != q * patch_dim {
            return Err(Error::invalid(format!(
                "{} patch values for {} patches of dimension {}",
                values.len(),
                q,
                patch_dim
            )));
        }
        Ok(Self { values, q, patch_dim })
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.values[i * self.patch_dim..(i + 1) * self.patch_dim]
    }
}

/// Batched encoder output for `n` items.
#[derive(Clone, Debug)]
pub struct ModalityOutput {
    /// `[n, d]`
    pub cls: NodeId,
    /// `[n, len, d]` per-token / per-patch vectors
    pub hiddens: NodeId,
    /// `[n * len]`, false at padded text positions
    pub mask: Vec<bool>,
}

pub(crate) fn init_text_encoder<T: Scalar>(ps: &mut ParamSet<T>, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
    let mut init = Init { rng };
    let d = cfg.d;
    ps.insert(format!("{TEXT_GROUP}.tok_emb"), init.normal(&[cfg.vocab_size, d]));
    ps.insert(format!("{TEXT_GROUP}.pos_emb"), init.normal(&[cfg.p_max + 1, d]));
    ps.insert(format!("{TEXT_GROUP}.cls"), init.normal(&[d]));
    for b in 0..cfg.n_blocks {
        init_block(ps, &mut init, &format!("{TEXT_GROUP}.block{b}"), d);
    }
    init_layer_norm(ps, &mut init, &format!("{TEXT_GROUP}.ln_f"), d);
}

pub(crate) fn init_vision_encoder<T: Scalar>(ps: &mut ParamSet<T>, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
    let mut init = Init { rng };
    let d = cfg.d;
    init_linear(ps, &mut init, &format!("{VISION_GROUP}.patch_proj"), cfg.patch_dim, d);
    if cfg.patch_positions {
        ps.insert(format!("{VISION_GROUP}.pos_emb"), init.normal(&[cfg.q + 1, d]));
    }
    ps.insert(format!("{VISION_GROUP}.cls"), init.normal(&[d]));
    for b in 0..cfg.n_blocks {
        init_block(ps, &mut init, &format!("{VISION_GROUP}.block{b}"), d);
    }
    init_layer_norm(ps, &mut init, &format!("{VISION_GROUP}.ln_f"), d);
}

pub(crate) fn init_fusion<T: Scalar>(ps: &mut ParamSet<T>, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
    let mut init = Init { rng };
    ps.insert(format!("{FUSION_GROUP}.mm_cls"), init.normal(&[cfg.d]));
    init_block(ps, &mut init, &format!("{FUSION_GROUP}.block0"), cfg.d);
    init_layer_norm(ps, &mut init, &format!("{FUSION_GROUP}.ln_f"), cfg.d);
}

/// Names of encoder parameters that stay fixed under `trainable_top_blocks`.
pub(crate) fn frozen_encoder_params<T: Scalar>(ps: &ParamSet<T>, cfg: &EncoderConfig) -> Vec<String> {
    let Some(k) = cfg.trainable_top_blocks else {
        return Vec::new();
    };
    let first_trainable = cfg.n_blocks - k;
    ps.names()
        .filter(|name| {
            let mut parts = name.split('.');
            let group = parts.next().unwrap_or("");
            if group != TEXT_GROUP && group != VISION_GROUP {
                return false;
            }
            match parts.next() {
                Some(p) if p.starts_with("block") => p[5..]
                    .parse::<usize>()
                    .map(|b| b < first_trainable)
                    .unwrap_or(false),
                Some("ln_f") => false,
                _ => true,
            }
        })
        .cloned()
        .collect()
}

/// Prepends a learned cls row to `x [n, len, d]`.
fn prepend_cls<T: Scalar>(s: &mut Session<'_, T>, x: NodeId, cls_name: &str) -> Result<NodeId> {
    let shape = s.g.shape(x).to_vec();
    let (n, d) = (shape[0], shape[2]);
    let cls = s.p(cls_name)?;
    let rows = s.g.gather(cls, &vec![0; n])?;
    let rows = s.g.reshape(rows, &[n, 1, d])?;
    s.g.concat(&[rows, x], 1)
}

/// Splits `[n, 1 + len, d]` into the cls rows `[n, d]` and the rest `[n, len, d]`.
fn split_cls<T: Scalar>(s: &mut Session<'_, T>, x: NodeId) -> Result<(NodeId, NodeId)> {
    let shape = s.g.shape(x).to_vec();
    let (n, full, d) = (shape[0], shape[1], shape[2]);
    let flat = s.g.reshape(x, &[n * full, d])?;
    let cls_rows: Vec<usize> = (0..n).map(|i| i * full).collect();
    let rest_rows: Vec<usize> = (0..n).flat_map(|i| (1..full).map(move |j| i * full + j)).collect();
    let cls = s.g.gather(flat, &cls_rows)?;
    let rest = s.g.gather(flat, &rest_rows)?;
    let rest = s.g.reshape(rest, &[n, full - 1, d])?;
    Ok((cls, rest))
}

fn run_blocks<T: Scalar>(
    s: &mut Session<'_, T>,
    group: &str,
    cfg: &EncoderConfig,
    mut x: NodeId,
    mask: &[bool],
) -> Result<NodeId> {
    for b in 0..cfg.n_blocks {
        x = block(s, &format!("{group}.block{b}"), x, cfg.n_heads, mask, None, 0.0)?;
    }
    layer_norm(s, x, &format!("{group}.ln_f"))
}

/// Text encoder over `items.len()` token sequences, each padded to `p_max`
/// (longer ones keep their first `p_max` real tokens). Padded positions are
/// looked up as [`PAD_ID`] whatever id they store and are masked as keys.
pub fn encode_text<T: Scalar>(
    s: &mut Session<'_, T>,
    cfg: &EncoderConfig,
    items: &[&TokenSequence],
) -> Result<ModalityOutput> {
    let n = items.len();
    let p = cfg.p_max;
    if n == 0 {
        return Err(Error::invalid("no items to encode"));
    }
    let mut ids = Vec::with_capacity(n * p);
    let mut mask = Vec::with_capacity(n * p);
    for item in items {
        if item.token_ids.len() != item.pad_mask.len() {
            return Err(Error::invalid("token ids and pad mask differ in length"));
        }
        let mut real = 0;
        for t in item.real_tokens().take(p) {
            if t >= cfg.vocab_size {
                return Err(Error::OutOfVocabulary {
                    id: t,
                    vocab: cfg.vocab_size,
                });
            }
            ids.push(t);
            mask.push(true);
            real += 1;
        }
        if real == 0 {
            return Err(Error::invalid("item text has no real token"));
        }
        for _ in real..p {
            ids.push(PAD_ID);
            mask.push(false);
        }
    }
    let emb = s.p(&format!("{TEXT_GROUP}.tok_emb"))?;
    let x = s.g.gather(emb, &ids)?;
    let x = s.g.reshape(x, &[n, p, cfg.d])?;
    let x = prepend_cls(s, x, &format!("{TEXT_GROUP}.cls"))?;
    let pos = s.p(&format!("{TEXT_GROUP}.pos_emb"))?;
    let x = s.g.add_bcast(x, pos)?;

    let mut key_mask = Vec::with_capacity(n * (p + 1));
    for i in 0..n {
        key_mask.push(true);
        key_mask.extend_from_slice(&mask[i * p..(i + 1) * p]);
    }
    let att_mask = key_padding_mask(&key_mask, n, p + 1, p + 1, false);
    let out = run_blocks(s, TEXT_GROUP, cfg, x, &att_mask)?;
    let (cls, hiddens) = split_cls(s, out)?;
    Ok(ModalityOutput { cls, hiddens, mask })
}

/// Vision encoder over `items.len()` patch sets of exactly `q × patch_dim`.
pub fn encode_vision<T: Scalar>(
    s: &mut Session<'_, T>,
    cfg: &EncoderConfig,
    items: &[&PatchSequence],
) -> Result<ModalityOutput> {
    let n = items.len();
    let q = cfg.q;
    if n == 0 {
        return Err(Error::invalid("no items to encode"));
    }
    let mut values = Vec::with_capacity(n * q * cfg.patch_dim);
    for item in items {
        if item.q != q || item.patch_dim != cfg.patch_dim || item.values.len() != q * cfg.patch_dim {
            return Err(Error::invalid(format!(
                "expected {} patches of dimension {}, got {} of dimension {}",
                q, cfg.patch_dim, item.q, item.patch_dim
            )));
        }
        values.extend(item.values.iter().map(|v| T::of(*v)));
    }
    let patches = s.g.constant(Tensor::new(vec![n, q, cfg.patch_dim], values)?);
    let w = s.p(&format!("{VISION_GROUP}.patch_proj.w"))?;
    let b = s.p(&format!("{VISION_GROUP}.patch_proj.b"))?;
    let x = s.g.matmul(patches, w)?;
    let x = s.g.add_bcast(x, b)?;
    let x = prepend_cls(s, x, &format!("{VISION_GROUP}.cls"))?;
    let x = if cfg.patch_positions {
        let pos = s.p(&format!("{VISION_GROUP}.pos_emb"))?;
        s.g.add_bcast(x, pos)?
    } else {
        x
    };
    let att_mask = vec![true; n * (q + 1) * (q + 1)];
    let out = run_blocks(s, VISION_GROUP, cfg, x, &att_mask)?;
    let (cls, hiddens) = split_cls(s, out)?;
    Ok(ModalityOutput {
        cls,
        hiddens,
        mask: vec![true; n * q],
    })
}

/// Merge-attention fusion: one transformer layer over
/// `[mm_cls; text tokens; patches]` with padded text masked out. Returns the
/// `[n, d]` outputs at the `mm_cls` position.
pub fn fuse<T: Scalar>(
    s: &mut Session<'_, T>,
    cfg: &EncoderConfig,
    text: &ModalityOutput,
    vision: &ModalityOutput,
) -> Result<NodeId> {
    let ts = s.g.shape(text.hiddens).to_vec();
    let vs = s.g.shape(vision.hiddens).to_vec();
    if ts.len() != 3 || vs.len() != 3 || ts[2] != cfg.d || vs[2] != cfg.d || ts[0] != vs[0] {
        return Err(Error::invalid(format!(
            "fusion inputs {:?} and {:?} do not share item count and d={}",
            ts, vs, cfg.d
        )));
    }
    let (n, p, q) = (ts[0], ts[1], vs[1]);
    if text.mask.len() != n * p || vision.mask.len() != n * q {
        return Err(Error::invalid("fusion masks do not match hidden shapes"));
    }
    let mm = s.p(&format!("{FUSION_GROUP}.mm_cls"))?;
    let mm = s.g.gather(mm, &vec![0; n])?;
    let mm = s.g.reshape(mm, &[n, 1, cfg.d])?;
    let seq = s.g.concat(&[mm, text.hiddens, vision.hiddens], 1)?;
    let len = 1 + p + q;
    let mut key_mask = Vec::with_capacity(n * len);
    for i in 0..n {
        key_mask.push(true);
        key_mask.extend_from_slice(&text.mask[i * p..(i + 1) * p]);
        key_mask.extend_from_slice(&vision.mask[i * q..(i + 1) * q]);
    }
    let att_mask = key_padding_mask(&key_mask, n, 1, len, false);
    let out = block(s, &format!("{FUSION_GROUP}.block0"), seq, cfg.n_heads, &att_mask, Some(&[0]), 0.0)?;
    let out = layer_norm(s, out, &format!("{FUSION_GROUP}.ln_f"))?;
    s.g.reshape(out, &[n, cfg.d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::jitter;
    use crate::model::{ItemRepr, Model, ModelConfig};
    use proptest::prelude::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            d: 8,
            n_blocks: 2,
            n_heads: 2,
            vocab_size: 20,
            p_max: 4,
            q: 3,
            patch_dim: 2,
            trainable_top_blocks: None,
            patch_positions: true,
        }
    }

    fn model(c: EncoderConfig) -> Model<f64> {
        let mut m = Model::new(
            ModelConfig {
                encoder: c,
                ..ModelConfig::default()
            },
            ItemRepr::Fused,
            3,
        )
        .unwrap();
        // away from the near-identity regime of a fresh init
        jitter(&mut m, 0.3, 4);
        m
    }

    fn text_cls(m: &Model<f64>, items: &[TokenSequence]) -> Vec<f64> {
        let mut s = m.session();
        let refs: Vec<_> = items.iter().collect();
        let out = encode_text(&mut s, &m.config.encoder, &refs).unwrap();
        s.g.value(out.cls).data().to_vec()
    }

    fn vision_cls(m: &Model<f64>, items: &[PatchSequence]) -> Vec<f64> {
        let mut s = m.session();
        let refs: Vec<_> = items.iter().collect();
        let out = encode_vision(&mut s, &m.config.encoder, &refs).unwrap();
        s.g.value(out.cls).data().to_vec()
    }

    #[test]
    fn padded_token_ids_are_ignored() {
        let m = model(cfg());
        let clean = TokenSequence::new(vec![3, 4]);
        let junk = TokenSequence::with_mask(vec![3, 4, 17, 9], vec![true, true, false, false]).unwrap();
        assert_eq!(text_cls(&m, &[clean]), text_cls(&m, &[junk]));
    }

    #[test]
    fn text_beyond_p_max_is_truncated() {
        let m = model(cfg());
        let a = TokenSequence::new(vec![1, 2, 3, 4, 5, 6]);
        let b = TokenSequence::new(vec![1, 2, 3, 4, 9]);
        let c = TokenSequence::new(vec![1, 2, 7, 4]);
        assert_eq!(text_cls(&m, &[a.clone()]), text_cls(&m, &[b]));
        assert_ne!(text_cls(&m, &[a]), text_cls(&m, &[c]));
    }

    #[test]
    fn text_rejects_out_of_vocabulary_and_empty() {
        let m = model(cfg());
        let mut s = m.session();
        let big = TokenSequence::new(vec![1, 20]);
        assert!(matches!(
            encode_text(&mut s, &m.config.encoder, &[&big]),
            Err(Error::OutOfVocabulary { id: 20, vocab: 20 })
        ));
        let empty = TokenSequence::new(vec![]);
        assert!(encode_text(&mut s, &m.config.encoder, &[&empty]).is_err());
    }

    #[test]
    fn vision_rejects_wrong_grid() {
        let m = model(cfg());
        let mut s = m.session();
        let p = PatchSequence::new(vec![0.0; 8], 4, 2).unwrap();
        assert!(encode_vision(&mut s, &m.config.encoder, &[&p]).is_err());
        assert!(PatchSequence::new(vec![0.0; 5], 2, 2).is_err());
    }

    #[test]
    fn patch_order_matters_only_with_positions() {
        let vals = vec![0.5, -1.0, 0.2, 0.9, -0.3, 0.4];
        let swapped = vec![0.2, 0.9, 0.5, -1.0, -0.3, 0.4];
        let a = PatchSequence::new(vals, 3, 2).unwrap();
        let b = PatchSequence::new(swapped, 3, 2).unwrap();
        let with = model(cfg());
        assert_ne!(vision_cls(&with, &[a.clone()]), vision_cls(&with, &[b.clone()]));
        let without = model(EncoderConfig {
            patch_positions: false,
            ..cfg()
        });
        let (x, y) = (vision_cls(&without, &[a]), vision_cls(&without, &[b]));
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_output_ignores_text_padding_but_sees_both_modalities() {
        let m = model(cfg());
        let fused = |toks: TokenSequence, patches: Vec<f64>| {
            let mut s = m.session();
            let p = PatchSequence::new(patches, 3, 2).unwrap();
            let t = encode_text(&mut s, &m.config.encoder, &[&toks]).unwrap();
            let v = encode_vision(&mut s, &m.config.encoder, &[&p]).unwrap();
            let f = fuse(&mut s, &m.config.encoder, &t, &v).unwrap();
            s.g.value(f).data().to_vec()
        };
        let patches = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let base = fused(TokenSequence::new(vec![5, 6]), patches.clone());
        let padded = TokenSequence::with_mask(vec![5, 6, 1, 2], vec![true, true, false, false]).unwrap();
        assert_eq!(base, fused(padded, patches.clone()));
        assert_ne!(base, fused(TokenSequence::new(vec![5, 7]), patches));
        assert_ne!(base, fused(TokenSequence::new(vec![5, 6]), vec![0.0; 6]));
    }

    #[test]
    fn top_block_freezing_leaves_fusion_and_user_trainable() {
        let c = EncoderConfig {
            trainable_top_blocks: Some(1),
            ..cfg()
        };
        let m = model(c);
        let frozen = m.frozen();
        assert!(frozen.contains("text_encoder.block0.attn.q.w"));
        assert!(frozen.contains("text_encoder.tok_emb"));
        assert!(frozen.contains("vision_encoder.patch_proj.w"));
        assert!(!frozen.contains("text_encoder.block1.attn.q.w"));
        assert!(!frozen.contains("vision_encoder.ln_f.g"));
        assert!(frozen.iter().all(|n| n.starts_with("text_encoder") || n.starts_with("vision_encoder")));
        assert!(EncoderConfig {
            trainable_top_blocks: Some(3),
            ..cfg()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        // items in a batch never see each other
        #[test]
        fn batch_rows_are_independent(
            toks in prop::collection::vec(prop::collection::vec(1usize..20, 1..7), 2..5),
        ) {
            let m = model(cfg());
            let items: Vec<TokenSequence> = toks.into_iter().map(TokenSequence::new).collect();
            let together = text_cls(&m, &items);
            for (i, it) in items.iter().enumerate() {
                let alone = text_cls(&m, std::slice::from_ref(it));
                for (a, b) in alone.iter().zip(&together[i * 8..(i + 1) * 8]) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
