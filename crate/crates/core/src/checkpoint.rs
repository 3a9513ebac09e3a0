//! Checkpoints: a JSON manifest next to a raw little-endian `f64` blob.
//!
//! `save(model, "run/checkpoint")` writes `run/checkpoint.json` and
//! `run/checkpoint.bin`. The manifest records each parameter's name, shape
//! and element offset plus a SHA-256 of the blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, StumError};
use crate::model::{Stum, StumConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "stum-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements, not bytes.
    pub offset: usize,
    pub len: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub config: StumConfig,
    pub params: Vec<ParamEntry>,
    pub blob_sha256: String,
    /// Best validation MAE at the time of saving, if known.
    pub val_mae: Option<f64>,
}

pub fn manifest_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

pub fn blob_path(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode(store: &ParamStore) -> (Vec<ParamEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(store.len());
    let mut blob = Vec::new();
    let mut offset = 0;
    for (_, p) in store.iter() {
        let v = p.value();
        entries.push(ParamEntry {
            name: p.name().to_string(),
            shape: v.shape().to_vec(),
            offset,
            len: v.len(),
            trainable: p.requires_grad(),
        });
        offset += v.len();
        for x in v.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    (entries, blob)
}

pub fn save(model: &Stum, base: &Path, val_mae: Option<f64>) -> Result<()> {
    let (params, blob) = encode(model.params());
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: "f64".into(),
        config: model.config().clone(),
        params,
        blob_sha256: hex_digest(&blob),
        val_mae,
    };
    let blob_file = blob_path(base);
    fs::write(&blob_file, &blob).map_err(|e| StumError::io(&blob_file, e))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let man_file = manifest_path(base);
    fs::write(&man_file, json).map_err(|e| StumError::io(&man_file, e))
}

pub fn read_manifest(base: &Path) -> Result<Manifest> {
    let path = manifest_path(base);
    let text = fs::read_to_string(&path).map_err(|e| StumError::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| StumError::CheckpointMismatch(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION || manifest.dtype != "f64" {
        return Err(StumError::CheckpointMismatch(format!(
            "unsupported checkpoint {} v{} ({})",
            manifest.format, manifest.version, manifest.dtype
        )));
    }
    Ok(manifest)
}

/// Reads the blob and decodes it into tensors, verifying the digest.
fn read_tensors(base: &Path, manifest: &Manifest) -> Result<Vec<Tensor>> {
    let path = blob_path(base);
    let blob = fs::read(&path).map_err(|e| StumError::io(&path, e))?;
    if hex_digest(&blob) != manifest.blob_sha256 {
        return Err(StumError::CheckpointMismatch(format!(
            "{}: blob digest does not match manifest",
            path.display()
        )));
    }
    let total: usize = manifest.params.iter().map(|p| p.len).sum();
    if blob.len() != total * 8 {
        return Err(StumError::CheckpointMismatch(format!(
            "blob holds {} bytes, manifest describes {}",
            blob.len(),
            total * 8
        )));
    }
    manifest
        .params
        .iter()
        .map(|p| {
            let bytes = blob
                .get(p.offset * 8..(p.offset + p.len) * 8)
                .ok_or_else(|| StumError::CheckpointMismatch(format!("{}: offset out of range", p.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Tensor::new(&p.shape, data).map_err(|_| StumError::CheckpointMismatch(format!("{}: bad shape", p.name)))
        })
        .collect()
}

/// Loads parameters into an existing model; layouts must agree exactly.
pub fn load_into(model: &mut Stum, base: &Path) -> Result<Manifest> {
    let manifest = read_manifest(base)?;
    let tensors = read_tensors(base, &manifest)?;
    let store = model.params_mut();
    if store.len() != manifest.params.len() {
        return Err(StumError::CheckpointMismatch(format!(
            "model has {} parameters, checkpoint has {}",
            store.len(),
            manifest.params.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for ((id, entry), tensor) in ids.into_iter().zip(&manifest.params).zip(tensors) {
        let p = store.get(id);
        if p.name() != entry.name || p.value().shape() != entry.shape.as_slice() {
            return Err(StumError::CheckpointMismatch(format!(
                "parameter {} {:?} does not match checkpoint entry {} {:?}",
                p.name(),
                p.value().shape(),
                entry.name,
                entry.shape
            )));
        }
        *store.value_mut(id) = tensor;
    }
    Ok(manifest)
}

/// Rebuilds the model from the stored configuration and loads it.
pub fn load(base: &Path) -> Result<(Stum, Manifest)> {
    let manifest = read_manifest(base)?;
    let mut model = Stum::new(manifest.config.clone())?;
    let manifest = load_into(&mut model, base)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> StumConfig {
        StumConfig {
            input_len: 3,
            horizon: 2,
            num_nodes: 3,
            embed_dim: 4,
            num_mlrf: 1,
            astucs_per_block: 2,
            seed: 11,
            ..StumConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("checkpoint");
        let mut model = Stum::new(toy()).unwrap();
        let id = model.params().find("head.bias").unwrap();
        model.params_mut().set(id, Tensor::vector(&[0.1, -1e-300])).unwrap();
        save(&model, &base, Some(1.25)).unwrap();

        let (loaded, manifest) = load(&base).unwrap();
        assert_eq!(manifest.val_mae, Some(1.25));
        for ((_, a), (_, b)) in model.params().iter().zip(loaded.params().iter()) {
            assert_eq!(a.name(), b.name());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.value()), bits(b.value()));
            assert_eq!(a.requires_grad(), b.requires_grad());
        }
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck");
        let model = Stum::new(toy()).unwrap();
        save(&model, &base, None).unwrap();
        let mut blob = fs::read(blob_path(&base)).unwrap();
        blob[17] ^= 0x40;
        fs::write(blob_path(&base), blob).unwrap();
        assert!(matches!(load(&base), Err(StumError::CheckpointMismatch(_))));
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck");
        save(&Stum::new(toy()).unwrap(), &base, None).unwrap();
        let mut other = Stum::new(StumConfig { embed_dim: 8, ..toy() }).unwrap();
        assert!(matches!(
            load_into(&mut other, &base),
            Err(StumError::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn offsets_are_contiguous() {
        let (entries, blob) = encode(Stum::new(toy()).unwrap().params());
        let mut next = 0;
        for e in &entries {
            assert_eq!(e.offset, next);
            assert_eq!(e.len, e.shape.iter().product::<usize>());
            next += e.len;
        }
        assert_eq!(blob.len(), next * 8);
    }
}
