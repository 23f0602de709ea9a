//! Checkpoint bundles, the five transfer modes, and full-catalog scoring.
//!
//! Bundle layout (all integers little-endian):
//!
//! ```text
//! b"MMRCKPT\0"            8 bytes magic
//! u32                     format version
//! u64                     manifest length n
//! [u8; n]                 JSON manifest: dtype, model config, item repr,
//!                         groups -> (sha256, tensors -> (shape, offset))
//! [u8; ..]                payload: tensors in manifest order, dtype-sized
//! [u8; 32]                SHA-256 of everything above
//! ```
//!
//! Groups and tensors are stored in name order, so equal parameters always
//! produce equal bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Catalog;
use crate::diffcore::Tensor;
use crate::encoders::{FUSION_GROUP, TEXT_GROUP, VISION_GROUP};
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::model::{init_group, ItemRepr, Model, ModelConfig, NID_GROUP};
use crate::params::{group_of, ParamSet};
use crate::scalar::Scalar;
use crate::user_encoder::{encode_sequence, USER_GROUP};

pub const MAGIC: &[u8; 8] = b"MMRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    Full,
    ItemEncoders,
    UserEncoder,
    TextOnly,
    VisionOnly,
}

impl TransferMode {
    pub const ALL: [TransferMode; 5] = [
        TransferMode::Full,
        TransferMode::ItemEncoders,
        TransferMode::UserEncoder,
        TransferMode::TextOnly,
        TransferMode::VisionOnly,
    ];

    /// Groups carried over from the bundle. `full` also takes the NID head
    /// when the bundle has one.
    pub fn transferred_groups(self) -> &'static [&'static str] {
        match self {
            TransferMode::Full => &[TEXT_GROUP, VISION_GROUP, FUSION_GROUP, USER_GROUP],
            TransferMode::ItemEncoders => &[TEXT_GROUP, VISION_GROUP, FUSION_GROUP],
            TransferMode::UserEncoder => &[USER_GROUP],
            TransferMode::TextOnly => &[TEXT_GROUP, USER_GROUP],
            TransferMode::VisionOnly => &[VISION_GROUP, USER_GROUP],
        }
    }

    /// Item vector fed to the user encoder and scored against.
    pub fn repr(self) -> ItemRepr {
        match self {
            TransferMode::TextOnly => ItemRepr::Text,
            TransferMode::VisionOnly => ItemRepr::Vision,
            _ => ItemRepr::Fused,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransferMode::Full => "full",
            TransferMode::ItemEncoders => "item_encoders",
            TransferMode::UserEncoder => "user_encoder",
            TransferMode::TextOnly => "text_only",
            TransferMode::VisionOnly => "vision_only",
        }
    }
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TransferMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown transfer mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub repr: ItemRepr,
    pub config: ModelConfig,
    pub groups: Vec<GroupEntry>,
}

/// A loaded checkpoint: manifest plus every stored parameter.
#[derive(Clone, Debug)]
pub struct Bundle<T: Scalar> {
    pub manifest: Manifest,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Bundle<T> {
    pub fn has_group(&self, group: &str) -> bool {
        self.manifest.groups.iter().any(|g| g.name == group)
    }

    /// Group names, shapes and checksums, one line per tensor.
    pub fn describe(&self) -> String {
        let mut out = format!(
            "format {} dtype {} repr {:?} d {}\n",
            FORMAT_VERSION, self.manifest.dtype, self.manifest.repr, self.manifest.config.encoder.d
        );
        for g in &self.manifest.groups {
            out.push_str(&format!("{}  sha256 {}\n", g.name, g.sha256));
            for t in &g.tensors {
                out.push_str(&format!("  {:<40} {:?}\n", t.name, t.shape));
            }
        }
        out
    }
}

fn encode_bundle<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut groups: BTreeMap<String, (Sha256, Vec<TensorEntry>)> = BTreeMap::new();
    let mut offset = 0;
    // ParamSet iterates in name order, which also groups by prefix
    for (name, t) in model.params.iter() {
        let start = payload.len();
        for v in t.data() {
            v.write_le(&mut payload);
        }
        let entry = groups
            .entry(group_of(name).to_string())
            .or_insert_with(|| (Sha256::new(), Vec::new()));
        entry.0.update(&payload[start..]);
        entry.1.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let manifest = Manifest {
        dtype: T::DTYPE.to_string(),
        repr: model.repr,
        config: model.config.clone(),
        groups: groups
            .into_iter()
            .map(|(name, (h, tensors))| GroupEntry {
                name,
                sha256: hex::encode(h.finalize()),
                tensors,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn bundle_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    encode_bundle(model)
}

pub fn save_bundle<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_bundle(model)).map_err(|e| Error::io(path, e))
}

pub fn parse_bundle<T: Scalar>(bytes: &[u8]) -> Result<Bundle<T>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint bundle (bad magic or truncated)"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(bad("checksum mismatch: file is corrupted"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (expected {})",
            version, FORMAT_VERSION
        )));
    }
    let mlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let payload_start = 20usize
        .checked_add(mlen)
        .filter(|e| *e <= body.len())
        .ok_or_else(|| bad("manifest length exceeds file"))?;
    let manifest: Manifest = serde_json::from_slice(&body[20..payload_start])
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "bundle holds {} values, model uses {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let payload = &body[payload_start..];
    let mut params = ParamSet::new();
    for g in &manifest.groups {
        let mut h = Sha256::new();
        for t in &g.tensors {
            if group_of(&t.name) != g.name {
                return Err(Error::Checkpoint(format!("tensor {} filed under group {}", t.name, g.name)));
            }
            let n: usize = t.shape.iter().product();
            let start = t.offset * T::BYTES;
            let end = start + n * T::BYTES;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} lies outside the payload", t.name)))?;
            h.update(raw);
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            params.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?);
        }
        if hex::encode(h.finalize()) != g.sha256 {
            return Err(Error::Checkpoint(format!("group {} checksum mismatch", g.name)));
        }
    }
    Ok(Bundle { manifest, params })
}

pub fn load_bundle<T: Scalar>(path: &Path) -> Result<Bundle<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_bundle(&bytes)
}

/// Restores a model exactly as saved.
pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let b = load_bundle::<T>(path)?;
    Model::from_params(b.manifest.config, b.manifest.repr, b.params)
}

fn check_group<T: Scalar>(bundle: &ParamSet<T>, fresh: &ParamSet<T>, group: &str) -> Result<()> {
    for (name, want) in fresh.group(group) {
        let got = bundle
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("group {} lacks tensor {}", group, name)))?;
        if got.rank() != want.rank() {
            return Err(Error::DimMismatch {
                group: group.into(),
                tensor: name.clone(),
                axis: got.rank().min(want.rank()),
                found: got.rank(),
                expected: want.rank(),
            });
        }
        for (axis, (f, e)) in got.shape().iter().zip(want.shape()).enumerate() {
            if f != e {
                return Err(Error::DimMismatch {
                    group: group.into(),
                    tensor: name.clone(),
                    axis,
                    found: *f,
                    expected: *e,
                });
            }
        }
    }
    if let Some((extra, _)) = bundle.group(group).find(|(n, _)| !fresh.contains(n)) {
        return Err(Error::Checkpoint(format!(
            "group {} has tensor {} the configured model does not",
            group, extra
        )));
    }
    Ok(())
}

/// Builds a model for `mode` under `config`: the mode's groups come from the
/// bundle (shape-checked against `config`), every other group the mode
/// needs is freshly initialized from `fresh_init_seed`, and groups the mode
/// does not use are left out.
pub fn load_components<T: Scalar>(
    bundle: &Bundle<T>,
    mode: TransferMode,
    fresh_init_seed: u64,
    config: &ModelConfig,
) -> Result<Model<T>> {
    config.validate()?;
    let repr = mode.repr();
    let mut params = ParamSet::new();
    let mut transferred: Vec<&str> = mode.transferred_groups().to_vec();
    if mode == TransferMode::Full && bundle.has_group(NID_GROUP) {
        transferred.push(NID_GROUP);
    }
    for g in &transferred {
        if !bundle.has_group(g) {
            return Err(Error::MissingGroup(g.to_string()));
        }
        let mut fresh = ParamSet::new();
        init_group(&mut fresh, config, g, 0);
        check_group(&bundle.params, &fresh, g)?;
        params.copy_group_from(&bundle.params, g);
    }
    for g in repr.groups() {
        if !transferred.contains(g) {
            init_group(&mut params, config, g, fresh_init_seed);
        }
    }
    Model::from_params(config.clone(), repr, params)
}

/// Cached item vectors for a whole catalog, tied to the parameter version
/// they were computed from.
#[derive(Clone, Debug)]
pub struct ItemIndex<T: Scalar> {
    /// `[catalog.len(), d]` in catalog order
    pub reps: Tensor<T>,
    version: u64,
    /// Items pushed through the encoders to build this index.
    pub encoded: usize,
}

impl<T: Scalar> ItemIndex<T> {
    pub fn is_fresh(&self, model: &Model<T>) -> bool {
        self.version == model.params.version()
    }
}

const INDEX_CHUNK: usize = 128;

pub fn build_item_index<T: Scalar>(model: &Model<T>, catalog: &Catalog) -> Result<ItemIndex<T>> {
    if catalog.is_empty() {
        return Err(Error::invalid("empty catalog"));
    }
    let d = model.config.encoder.d;
    let mut data = Vec::with_capacity(catalog.len() * d);
    let mut encoded = 0;
    for chunk in catalog.items().chunks(INDEX_CHUNK) {
        let mut s = model.session();
        let refs: Vec<_> = chunk.iter().collect();
        let enc = model.encode_items(&mut s, &refs)?;
        encoded += refs.len();
        data.extend_from_slice(s.g.value(enc.reps).data());
    }
    Ok(ItemIndex {
        reps: Tensor::new(vec![catalog.len(), d], data)?,
        version: model.params.version(),
        encoded,
    })
}

/// Dot products `h · e_i` for every prefix against every catalog item, using
/// the user state at the last real position. Prefixes longer than the user
/// encoder's window keep their most recent items.
pub fn score_logits<T: Scalar>(
    model: &Model<T>,
    index: &ItemIndex<T>,
    catalog: &Catalog,
    prefixes: &[&[usize]],
) -> Result<Vec<Vec<f64>>> {
    if prefixes.is_empty() {
        return Ok(Vec::new());
    }
    let l_max = model.config.user.l_max;
    let cut: Vec<&[usize]> = prefixes
        .iter()
        .map(|p| &p[p.len().saturating_sub(l_max)..])
        .collect();
    if let Some(p) = cut.iter().position(|p| p.is_empty()) {
        return Err(Error::invalid(format!("prefix {} has no item", p)));
    }
    let b = cut.len();
    let len = cut.iter().map(|p| p.len()).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(b * len);
    let mut mask = Vec::with_capacity(b * len);
    for p in &cut {
        for l in 0..len {
            match p.get(l) {
                Some(item) => {
                    rows.push(catalog.position(*item).ok_or(Error::UnknownItem(*item))?);
                    mask.push(true);
                }
                None => {
                    rows.push(0);
                    mask.push(false);
                }
            }
        }
    }
    let d = index.reps.last_dim();
    let mut s = model.session();
    let table = s.g.constant(index.reps.clone());
    let x = s.g.gather(table, &rows)?;
    let x = s.g.reshape(x, &[b, len, d])?;
    let h = encode_sequence(&mut s, &model.config.user, x, &mask)?;
    let h = s.g.reshape(h, &[b * len, d])?;
    let last: Vec<usize> = cut.iter().enumerate().map(|(u, p)| u * len + p.len() - 1).collect();
    let h = s.g.gather(h, &last)?;
    let logits = s.g.matmul_t(h, table)?;
    let n = catalog.len();
    Ok(s.g
        .value(logits)
        .data()
        .chunks(n)
        .map(|r| r.iter().map(|v| v.f64()).collect())
        .collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Next-item probabilities over the full catalog.
pub fn predict_scores<T: Scalar>(
    model: &Model<T>,
    index: &ItemIndex<T>,
    catalog: &Catalog,
    prefix: &[usize],
) -> Result<Vec<f64>> {
    let logits = score_logits(model, index, catalog, &[prefix])?;
    Ok(softmax(&logits[0]))
}

/// [`Scorer`] over a model, rebuilding its item index whenever the
/// parameters change.
pub struct ModelScorer<'a, T: Scalar> {
    pub model: &'a Model<T>,
    pub catalog: &'a Catalog,
    index: Option<ItemIndex<T>>,
    pub builds: usize,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(model: &'a Model<T>, catalog: &'a Catalog) -> Self {
        Self {
            model,
            catalog,
            index: None,
            builds: 0,
        }
    }

    pub fn index(&mut self) -> Result<&ItemIndex<T>> {
        if !self.index.as_ref().is_some_and(|i| i.is_fresh(self.model)) {
            self.index = Some(build_item_index(self.model, self.catalog)?);
            self.builds += 1;
        }
        Ok(self.index.as_ref().expect("just built"))
    }
}

impl<T: Scalar> Scorer for ModelScorer<'_, T> {
    fn score(&mut self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        self.index()?;
        let index = self.index.as_ref().expect("built");
        score_logits(self.model, index, self.catalog, prefixes)
    }
}
