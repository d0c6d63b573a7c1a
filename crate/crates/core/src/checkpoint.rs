//! Checkpoint container: `weights.bin` holds every tensor as flat
//! little-endian f32, `manifest.json` the tensor table, hashes and
//! provenance.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{InpaintModel, ModelSpec};
use crate::nn::hash_f32;
use crate::refiner::{RefineNet, REFINE_PREFIX};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderInfo {
    pub seed: u64,
    pub frozen_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    /// 0 for untrained weights, else the training stage that produced them.
    pub stage: u8,
    pub spec: ModelSpec,
    /// Resolved configuration of the run that wrote the checkpoint.
    pub config: serde_json::Value,
    pub has_refine: bool,
    pub weights_sha256: String,
    pub parent_sha256: Option<String>,
    pub encoder: EncoderInfo,
    pub trainable: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `model` into `dir`, replacing any previous checkpoint files.
pub fn save(
    dir: &Path,
    model: &InpaintModel,
    stage: u8,
    config: serde_json::Value,
    parent: Option<String>,
) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, data) in model.store.export()? {
        tensors.push(TensorEntry { name, offset: bytes.len(), shape, sha256: hash_f32(&data) });
        for v in &data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        stage,
        spec: model.spec.clone(),
        config,
        has_refine: model.refine.is_some(),
        weights_sha256: hex::encode(Sha256::digest(&bytes)),
        parent_sha256: parent,
        encoder: EncoderInfo {
            seed: model.spec.conditioner.seed,
            frozen_hash: model.conditioner.frozen_hash().to_string(),
        },
        trainable: model.store.trainable_names(),
        tensors,
    };
    std::fs::write(dir.join(WEIGHTS_FILE), &bytes)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!("unsupported schema version {}", m.schema_version)));
    }
    Ok(m)
}

pub fn load(dir: &Path) -> Result<(InpaintModel, CheckpointManifest)> {
    load_as(dir, DType::F32)
}

/// Loads and verifies a checkpoint, holding weights as `dtype`. Every
/// parameter comes back frozen.
pub fn load_as(dir: &Path, dtype: DType) -> Result<(InpaintModel, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let bytes = std::fs::read(dir.join(WEIGHTS_FILE))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.weights_sha256 {
        return Err(Error::Checkpoint("weights.bin does not match its manifest hash".into()));
    }
    let mut model = InpaintModel::skeleton(manifest.spec.clone(), dtype)?;
    if model.conditioner.frozen_hash() != manifest.encoder.frozen_hash {
        return Err(Error::Checkpoint("frozen encoder weights differ from the checkpoint's".into()));
    }
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        let raw = bytes
            .get(e.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past weights.bin", e.name)))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if hash_f32(&data) != e.sha256 {
            return Err(Error::Checkpoint(format!("tensor `{}` hash mismatch", e.name)));
        }
        model.store.insert(e.name.clone(), Tensor::from_vec(data, e.shape.as_slice(), model.store.device())?)?;
    }
    let has_refine = model.store.names().any(|n| n.starts_with(&format!("{REFINE_PREFIX}.")));
    if has_refine != manifest.has_refine {
        return Err(Error::Checkpoint("refinement weights disagree with manifest".into()));
    }
    if has_refine {
        model.refine = Some(RefineNet::new(manifest.spec.model.clone()));
    }
    Ok((model, manifest))
}
