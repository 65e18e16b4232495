//! Named-parameter archives: a JSON manifest next to a little-endian f32
//! blob.
//!
//! A checkpoint lives in a directory as `weights.json` + `weights.bin`.
//! Parameters are stored in insertion order, so saving a loaded archive
//! reproduces both files byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::captioner::Captioner;
use crate::config::ModelConfig;
use crate::distill::{FeatureMode, ImportanceHead};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::params::ParamStore;

pub const MANIFEST_FILE: &str = "weights.json";
pub const BLOB_FILE: &str = "weights.bin";
const FORMAT: &str = "tsg-params/1";
const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveManifest {
    pub format: String,
    pub model: ModelConfig,
    pub vocab_size: usize,
    /// Present when the archive carries an importance head.
    pub feature_mode: Option<FeatureMode>,
    pub blob_bytes: usize,
    pub tensors: Vec<TensorEntry>,
}

/// A trained captioner, optionally with its importance head.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub captioner: Captioner,
    pub head: Option<ImportanceHead>,
}

fn encode(stores: &[&ParamStore]) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for store in stores {
        for (_, name, m) in store.iter() {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: [m.rows(), m.cols()],
                dtype: "f32".into(),
                offset: blob.len(),
            });
            for &v in m.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    (entries, blob)
}

fn corrupt(msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(msg.to_string())
}

fn decode(entries: &[TensorEntry], blob: &[u8]) -> Result<(ParamStore, ParamStore)> {
    let mut body = ParamStore::new();
    let mut head = ParamStore::new();
    let mut expected_offset = 0usize;
    for e in entries {
        if e.dtype != "f32" {
            return Err(corrupt(format!(
                "tensor `{}` has unsupported dtype `{}`",
                e.name, e.dtype
            )));
        }
        if e.offset != expected_offset {
            return Err(corrupt(format!(
                "tensor `{}` offset {} breaks contiguity",
                e.name, e.offset
            )));
        }
        let count = e.shape[0]
            .checked_mul(e.shape[1])
            .ok_or_else(|| corrupt(format!("tensor `{}` shape overflows", e.name)))?;
        let end = e.offset + 4 * count;
        let bytes = blob
            .get(e.offset..end)
            .ok_or_else(|| corrupt(format!("tensor `{}` runs past the end of the blob", e.name)))?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(corrupt(format!(
                "tensor `{}` holds non-finite values",
                e.name
            )));
        }
        let store = if e.name.starts_with(HEAD_PREFIX) {
            &mut head
        } else {
            &mut body
        };
        if store.id(&e.name).is_some() {
            return Err(corrupt(format!("duplicate tensor `{}`", e.name)));
        }
        store.insert(e.name.clone(), Mat::from_vec(e.shape[0], e.shape[1], data));
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(corrupt(format!(
            "blob has {} trailing bytes",
            blob.len() - expected_offset
        )));
    }
    Ok((body, head))
}

pub fn save(dir: &Path, captioner: &Captioner, head: Option<&ImportanceHead>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut stores = vec![captioner.params()];
    if let Some(h) = head {
        stores.push(h.params());
    }
    let (tensors, blob) = encode(&stores);
    let manifest = ArchiveManifest {
        format: FORMAT.into(),
        model: captioner.config().clone(),
        vocab_size: captioner.vocab_size(),
        feature_mode: head.map(|h| h.mode()),
        blob_bytes: blob.len(),
        tensors,
    };
    fs::write(dir.join(BLOB_FILE), &blob)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn files(dir: &Path) -> [PathBuf; 2] {
    [dir.join(MANIFEST_FILE), dir.join(BLOB_FILE)]
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let [mpath, bpath] = files(dir);
    let text =
        fs::read_to_string(&mpath).map_err(|e| corrupt(format!("{}: {e}", mpath.display())))?;
    let manifest: ArchiveManifest =
        serde_json::from_str(&text).map_err(|e| corrupt(format!("{}: {e}", mpath.display())))?;
    if manifest.format != FORMAT {
        return Err(corrupt(format!(
            "unknown archive format `{}`",
            manifest.format
        )));
    }
    let blob = fs::read(&bpath).map_err(|e| corrupt(format!("{}: {e}", bpath.display())))?;
    if blob.len() != manifest.blob_bytes {
        return Err(corrupt(format!(
            "blob is {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let (body, head_params) = decode(&manifest.tensors, &blob)?;
    let captioner = Captioner::from_params(manifest.model.clone(), manifest.vocab_size, body)
        .map_err(as_checkpoint)?;
    let head = match manifest.feature_mode {
        Some(mode) => Some(ImportanceHead::from_params(mode, head_params).map_err(as_checkpoint)?),
        None if !head_params.is_empty() => {
            return Err(corrupt("head tensors present without a feature mode"))
        }
        None => None,
    };
    Ok(Checkpoint { captioner, head })
}

fn as_checkpoint(e: Error) -> Error {
    match e {
        Error::Checkpoint(_) => e,
        other => Error::Checkpoint(other.to_string()),
    }
}

/// Loads a checkpoint and checks its architecture against an expected model
/// config.
pub fn load_compatible(dir: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load(dir)?;
    check_compatible(&ck, expected)?;
    Ok(ck)
}

/// Errors unless the checkpoint's architecture equals `expected`'s. `lambda`
/// and `seed` only affect training and are not compared.
pub fn check_compatible(ck: &Checkpoint, expected: &ModelConfig) -> Result<()> {
    let mut stored = ck.captioner.config().clone();
    stored.lambda = expected.lambda;
    stored.seed = expected.seed;
    if &stored != expected {
        return Err(corrupt(format!(
            "checkpoint architecture {} does not match the configured {}",
            arch(ck.captioner.config()),
            arch(expected)
        )));
    }
    Ok(())
}

fn arch(c: &ModelConfig) -> String {
    format!(
        "{} d_v={} d_l={} d_h={} d_a={} d_e={} d_u={} d_s={} d_sem={} d_tr={} heads={} layers={}/{} attn_layer={:?}",
        c.backbone, c.d_v, c.d_l, c.d_h, c.d_a, c.d_e, c.d_u, c.d_s, c.d_sem, c.d_tr, c.heads, c.enc_layers, c.dec_layers, c.attn_layer
    )
}
