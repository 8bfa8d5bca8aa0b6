//! Checkpoint persistence: a directory holding a JSON manifest (names,
//! shapes, dtype, training metadata) plus one little-endian f64 blob per
//! tensor, so other toolchains can read the weights without this crate.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sinkhorn_guidance::denoiser::{DenoiserParams, ModelConfig};
use sinkhorn_guidance::{Rng, Tensor};

use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMeta {
    pub dataset: String,
    pub steps: usize,
    pub final_loss: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainMeta,
    pub tensors: Vec<TensorEntry>,
}

fn blob_file(name: &str) -> String {
    format!("{name}.bin")
}

fn write_blob(path: &Path, t: &Tensor) -> CliResult<()> {
    let mut bytes = Vec::with_capacity(t.data.len() * 8);
    for v in &t.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(fs::write(path, bytes)?)
}

fn read_blob(path: &Path, numel: usize) -> CliResult<Vec<f64>> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Input(format!("checkpoint blob {}: {e}", path.display())))?;
    if bytes.len() != numel * 8 {
        return Err(CliError::Input(format!(
            "checkpoint blob {}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            numel * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Write `params` plus its training metadata under `dir`.
pub fn save(dir: &Path, params: &DenoiserParams, meta: &TrainMeta) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let named = params.named();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in &named {
        let file = blob_file(name);
        write_blob(&dir.join(&file), t)?;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            dtype: "f64".into(),
            file,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        model: params.config,
        train: meta.clone(),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join(MANIFEST_NAME), json + "\n")?;
    Ok(())
}

/// Read a checkpoint directory back into parameters. Shape mismatches are
/// reported with every offending tensor name.
pub fn load(dir: &Path) -> CliResult<(DenoiserParams, Manifest)> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| CliError::Input(format!("checkpoint {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("checkpoint {}: {e}", manifest_path.display())))?;
    if manifest.version != FORMAT_VERSION {
        return Err(CliError::Input(format!(
            "checkpoint format version {} unsupported (expected {FORMAT_VERSION})",
            manifest.version
        )));
    }

    // the rng only shapes the initial tensors, which are all overwritten
    let mut params = DenoiserParams::init(manifest.model, &mut Rng::new(0))?;
    let mut mismatches = Vec::new();
    for (name, tensor) in params.named_mut() {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CliError::Input(format!("checkpoint missing tensor {name:?}")))?;
        if entry.shape != tensor.shape {
            mismatches.push(format!(
                "{name}: checkpoint {:?} vs model {:?}",
                entry.shape, tensor.shape
            ));
            continue;
        }
        tensor.data = read_blob(&dir.join(&entry.file), tensor.numel())?;
    }
    if !mismatches.is_empty() {
        return Err(CliError::Input(format!(
            "checkpoint shape mismatch: {}",
            mismatches.join("; ")
        )));
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params(seed: u64) -> DenoiserParams {
        let cfg = ModelConfig {
            num_classes: 2,
            n_tokens: 4,
            point_dim: 2,
            d_model: 8,
            n_heads: 2,
            n_blocks: 2,
            ff_dim: 16,
        };
        DenoiserParams::init(cfg, &mut Rng::new(seed)).unwrap()
    }

    fn meta() -> TrainMeta {
        TrainMeta {
            dataset: "gauss8".into(),
            steps: 10,
            final_loss: 0.5,
            seed: 1,
            config_hash: "deadbeef".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let params = small_params(3);
        save(dir.path(), &params, &meta()).unwrap();
        let (loaded, manifest) = load(dir.path()).unwrap();
        assert_eq!(manifest.train.steps, 10);
        for ((na, ta), (nb, tb)) in params.named().iter().zip(loaded.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape, tb.shape);
            assert_eq!(ta.data, tb.data, "{na} not bit-identical");
        }
    }

    #[test]
    fn save_twice_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let params = small_params(4);
        save(a.path(), &params, &meta()).unwrap();
        save(b.path(), &params, &meta()).unwrap();
        for entry in std::fs::read_dir(a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let x = std::fs::read(a.path().join(&name)).unwrap();
            let y = std::fs::read(b.path().join(&name)).unwrap();
            assert_eq!(x, y, "{name:?} differs between saves");
        }
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let params = small_params(5);
        save(dir.path(), &params, &meta()).unwrap();
        // rewrite the manifest with a corrupted shape for one tensor
        let path = dir.path().join(MANIFEST_NAME);
        let mut manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let entry = manifest
            .tensors
            .iter_mut()
            .find(|e| e.name == "head.w")
            .unwrap();
        entry.shape = vec![1, 1];
        std::fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("head.w"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_manifest_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
