//! Model checkpoints: a directory holding `manifest.json` (architecture id,
//! geometry, digest, recorded accuracies, provenance seed) and `params.bin`
//! (all parameters as little-endian f32 in the canonical order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes::sha256_hex;
use crate::error::{PapError, Result};
use crate::model::cnn::{ReferenceCnn, ARCH_ID};
use crate::num::Real;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const PARAMS_FILE: &str = "params.bin";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub arch: String,
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub param_count: usize,
    /// SHA-256 of `params.bin`.
    pub param_digest: String,
    /// Seed the architecture was built from (weight init provenance).
    pub seed: u64,
    /// Free-form training provenance: regime name and recorded accuracies.
    #[serde(default)]
    pub training: Option<TrainingRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub regime: String,
    pub epochs: usize,
    pub clean_accuracy: f64,
    /// Robust accuracy under the training attack, when one was used.
    #[serde(default)]
    pub robust_accuracy: Option<f64>,
}

/// Write a checkpoint directory, creating it if needed.
pub fn save_model<F: Real>(
    model: &ReferenceCnn<F>,
    dir: &Path,
    seed: u64,
    training: Option<TrainingRecord>,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let bytes = model.param_bytes();
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        arch: ARCH_ID.to_string(),
        input_shape: crate::model::Classifier::input_shape(model),
        num_classes: crate::model::Classifier::num_classes(model),
        param_count: model.param_count(),
        param_digest: sha256_hex(&bytes),
        seed,
        training,
    };
    fs::write(dir.join(PARAMS_FILE), &bytes)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Load a checkpoint directory; verifies the format version, architecture id,
/// and parameter digest before accepting the blob.
pub fn load_model(dir: &Path) -> Result<(ReferenceCnn<f32>, CheckpointManifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_text = fs::read_to_string(&manifest_path).map_err(|e| {
        PapError::Data(format!(
            "cannot read checkpoint manifest {}: {e}",
            manifest_path.display()
        ))
    })?;
    let manifest: CheckpointManifest = serde_json::from_str(&manifest_text)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(PapError::Format(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    if manifest.arch != ARCH_ID {
        return Err(PapError::Format(format!(
            "unknown architecture id {:?}",
            manifest.arch
        )));
    }
    let bytes = fs::read(dir.join(PARAMS_FILE)).map_err(|e| {
        PapError::Data(format!(
            "cannot read checkpoint parameters in {}: {e}",
            dir.display()
        ))
    })?;
    if sha256_hex(&bytes) != manifest.param_digest {
        return Err(PapError::Format(format!(
            "parameter blob in {} does not match its manifest digest",
            dir.display()
        )));
    }
    let mut model = ReferenceCnn::build(manifest.input_shape, manifest.num_classes, manifest.seed)?;
    model.load_param_bytes(&bytes)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Classifier;

    #[test]
    fn save_load_round_trip() {
        let dir = tempdir("ckpt-roundtrip");
        let model: ReferenceCnn<f32> = ReferenceCnn::build((1, 28, 28), 10, 99).unwrap();
        let manifest = save_model(&model, &dir, 99, None).unwrap();
        assert_eq!(manifest.param_digest, model.param_digest());
        let (loaded, m2) = load_model(&dir).unwrap();
        assert_eq!(loaded.param_digest(), model.param_digest());
        assert_eq!(m2.param_count, 82_442);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempdir("ckpt-corrupt");
        let model: ReferenceCnn<f32> = ReferenceCnn::build((1, 28, 28), 10, 7).unwrap();
        save_model(&model, &dir, 7, None).unwrap();
        let path = dir.join(PARAMS_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[10] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&dir), Err(PapError::Format(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_checkpoint_names_the_path() {
        let err = load_model(Path::new("/nonexistent/ckpt")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/nonexistent/ckpt"), "message was: {msg}");
    }

    fn tempdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("pap-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
