//! Checkpoint directories.
//!
//! A checkpoint is a `manifest.json` plus a `tensors.bin`. The manifest
//! carries everything needed to rebuild the model shell (bank, configs,
//! dimensions) and a shape table into the binary blob; the blob is the
//! tensors' values as little-endian f32 in manifest order, digested into
//! the manifest so corruption is caught before any weight is used.
//! Identical models write byte-identical checkpoints.

use crate::concept_bank::{AssociationMatrix, Concept, ConceptVocabulary};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::logic::LogicConfig;
use crate::model::Model;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into tensors.bin.
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub concepts: Vec<Concept>,
    pub actions: Vec<String>,
    pub matrix_rows: Vec<Vec<u8>>,
    pub decoder: DecoderConfig,
    pub logic: LogicConfig,
    pub channels: usize,
    pub text_dim: usize,
    pub proj_dim: usize,
    pub tensors: Vec<TensorEntry>,
    pub bin_sha256: String,
}

/// Run identity a checkpoint records alongside the weights.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub matrix_rows: Vec<Vec<u8>>,
    pub channels: usize,
    pub text_dim: usize,
    pub proj_dim: usize,
}

pub fn save_model(dir: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut bin: Vec<u8> = Vec::new();
    model.for_each(&mut |name, tensor| {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset: bin.len(),
            len: tensor.len(),
        });
        for &v in tensor.iter() {
            bin.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    let digest = format!("{:x}", Sha256::digest(&bin));
    let manifest = ModelManifest {
        schema_version: crate::SCHEMA_VERSION,
        config_hash: meta.config_hash.clone(),
        seed: meta.seed,
        epoch: meta.epoch,
        concepts: model.vocabulary.concepts().to_vec(),
        actions: model.actions.clone(),
        matrix_rows: meta.matrix_rows.clone(),
        decoder: model.decoder_config.clone(),
        logic: model.logic.config.clone(),
        channels: meta.channels,
        text_dim: meta.text_dim,
        proj_dim: meta.proj_dim,
        tensors: entries,
        bin_sha256: digest,
    };
    std::fs::write(
        dir.join("manifest.json"),
        crate::concept_bank::to_canonical_json(&manifest),
    )?;
    std::fs::write(dir.join("tensors.bin"), bin)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(Model, ModelManifest)> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath)?;
    let manifest: ModelManifest = serde_json::from_str(&text)
        .map_err(|e| Error::schema(mpath.display().to_string(), e.to_string()))?;
    if manifest.schema_version != crate::SCHEMA_VERSION {
        return Err(Error::schema(
            mpath.display().to_string(),
            format!("unsupported schema_version {}", manifest.schema_version),
        ));
    }
    let bpath = dir.join("tensors.bin");
    let bin = std::fs::read(&bpath)?;
    let digest = format!("{:x}", Sha256::digest(&bin));
    if digest != manifest.bin_sha256 {
        return Err(Error::schema(
            bpath.display().to_string(),
            "tensor digest mismatch; checkpoint is corrupt".to_string(),
        ));
    }

    let vocabulary = ConceptVocabulary::new(manifest.concepts.clone())?;
    let matrix = AssociationMatrix::new(
        manifest.actions.clone(),
        vocabulary.names(),
        manifest.matrix_rows.clone(),
    )?;
    let mut model = Model::init(
        vocabulary,
        &matrix,
        manifest.decoder.clone(),
        manifest.logic.clone(),
        manifest.channels,
        manifest.text_dim,
        manifest.proj_dim,
        manifest.seed,
    )?;

    let mut by_name = std::collections::BTreeMap::new();
    for e in &manifest.tensors {
        let end = e.offset + e.len * 4;
        if end > bin.len() {
            return Err(Error::schema(
                bpath.display().to_string(),
                format!("tensor '{}' runs past end of blob", e.name),
            ));
        }
        let vals: Vec<f64> = bin[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), vals)
            .map_err(|err| Error::schema(bpath.display().to_string(), err.to_string()))?;
        by_name.insert(e.name.clone(), arr);
    }

    let mut missing = Vec::new();
    model.for_each_mut(&mut |name, tensor| match by_name.remove(name) {
        Some(arr) if arr.shape() == tensor.shape() => {
            *tensor = Arc::new(arr);
        }
        Some(arr) => missing.push(format!(
            "tensor '{name}' has shape {:?}, expected {:?}",
            arr.shape(),
            tensor.shape()
        )),
        None => missing.push(format!("tensor '{name}' missing from checkpoint")),
    });
    for (name, _) in by_name {
        missing.push(format!("tensor '{name}' not part of this model"));
    }
    if !missing.is_empty() {
        return Err(Error::schema(mpath.display().to_string(), missing.join("; ")));
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn tiny_model(seed: u64) -> (Model, CheckpointMeta) {
        let (vocab, matrix) = synthetic::planted_bank(4, 10, seed).unwrap();
        let model = Model::init(
            vocab,
            &matrix,
            DecoderConfig { dim: 16, hidden: 8, spatial_groups: 2, temporal_groups: 2, heads: 1 },
            LogicConfig { layers: 2, width: 4, skip: true, negation: true },
            16,
            32,
            8,
            seed,
        )
        .unwrap();
        let meta = CheckpointMeta {
            config_hash: "cafe".to_string(),
            seed,
            epoch: 17,
            matrix_rows: matrix.rows.clone(),
            channels: 16,
            text_dim: 32,
            proj_dim: 8,
        };
        (model, meta)
    }

    #[test]
    fn round_trip_preserves_values_at_storage_precision() {
        let (model, meta) = tiny_model(4);
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &model, &meta).unwrap();
        let (loaded, manifest) = load_model(dir.path()).unwrap();
        assert_eq!(manifest.epoch, 17);
        assert_eq!(manifest.config_hash, "cafe");
        assert_eq!(loaded.tensor_names(), model.tensor_names());

        let mut originals = Vec::new();
        model.for_each(&mut |_, t| originals.push(t.clone()));
        let mut i = 0;
        loaded.for_each(&mut |name, t| {
            for (a, b) in t.iter().zip(originals[i].iter()) {
                assert_eq!(*a, (*b as f32) as f64, "{name}");
            }
            i += 1;
        });
    }

    #[test]
    fn identical_models_write_identical_bytes() {
        let (model, meta) = tiny_model(5);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_model(d1.path(), &model, &meta).unwrap();
        save_model(d2.path(), &model, &meta).unwrap();
        for f in ["manifest.json", "tensors.bin"] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn corruption_is_detected() {
        let (model, meta) = tiny_model(6);
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &model, &meta).unwrap();
        let bpath = dir.path().join("tensors.bin");
        let mut bin = std::fs::read(&bpath).unwrap();
        bin[8] ^= 0xff;
        std::fs::write(&bpath, bin).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(err.to_string().contains("digest"));
    }

    #[test]
    fn missing_tensor_is_reported_by_name() {
        let (model, meta) = tiny_model(7);
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &model, &meta).unwrap();
        let mpath = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&mpath).unwrap();
        let mut manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
        let tensors = manifest["tensors"].as_array_mut().unwrap();
        let removed = tensors
            .iter()
            .position(|t| t["name"] == "classifier/bias")
            .unwrap();
        tensors.remove(removed);
        std::fs::write(&mpath, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(err.to_string().contains("classifier/bias"));
    }
}
