//! Checkpoint format: a directory holding `manifest.json` (name → shape,
//! dtype, byte offset) plus `weights.bin`, a contiguous little-endian blob
//! of 32-bit floats in row-major order. `config.json` sits alongside so a
//! checkpoint is self-describing.
//!
//! Weights live in f64 in memory and round to f32 on save; a saved file
//! reloads and re-saves byte-identically.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::NdArray;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into weights.bin.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
}

/// Write named tensors as f32; order in the manifest follows the input.
pub fn save_tensors(dir: &Path, tensors: &[(String, &NdArray)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, arr) in tensors {
        let offset = blob.len();
        for &v in arr.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            dtype: "f32".into(),
            offset,
        });
    }
    let manifest = Manifest { version: 1, tensors: entries };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    Ok(())
}

/// Read all tensors back (f32 → f64), in manifest order.
pub fn load_tensors(dir: &Path) -> Result<Vec<(String, NdArray)>> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * n;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' extends past the end of {WEIGHTS_FILE}",
                entry.name
            )));
        }
        let data: Vec<f64> = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        out.push((entry.name.clone(), NdArray::new(entry.shape.clone(), data)?));
    }
    Ok(out)
}

impl Model {
    /// Save weights + manifest + config into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let named = self.named_params();
        save_tensors(dir, &named)?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    /// Load a checkpoint directory saved by `save_checkpoint`. Every model
    /// parameter must appear exactly once with a matching shape.
    pub fn load_checkpoint(dir: &Path) -> Result<Model> {
        let config: ModelConfig =
            serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        config.validate()?;
        // Architecture from the config; weights overwritten below.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::init(config, &mut rng)?;
        model.load_weights(dir)?;
        Ok(model)
    }

    /// Overwrite this model's parameters from a checkpoint directory.
    pub fn load_weights(&mut self, dir: &Path) -> Result<()> {
        let mut tensors: HashMap<String, NdArray> = load_tensors(dir)?.into_iter().collect();
        let mut missing = Vec::new();
        self.for_each_param_mut(&mut |name, arr| {
            match tensors.remove(&name) {
                Some(loaded) if loaded.shape() == arr.shape() => *arr = loaded,
                Some(loaded) => missing.push(format!(
                    "{name}: shape {:?} vs checkpoint {:?}",
                    arr.shape(),
                    loaded.shape()
                )),
                None => missing.push(format!("{name}: absent from checkpoint")),
            };
        });
        if !missing.is_empty() {
            return Err(Error::Checkpoint(missing.join("; ")));
        }
        if !tensors.is_empty() {
            let extra: Vec<String> = tensors.into_keys().collect();
            return Err(Error::Checkpoint(format!("unused tensors: {}", extra.join(", "))));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::named_config;
    use std::env;

    fn temp_dir(tag: &str) -> std::path::PathBuf {
        let dir = env::temp_dir().join(format!("ssmnd-ckpt-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    fn tiny_model(seed: u64) -> Model {
        let mut cfg = named_config("2d-tiny").unwrap();
        cfg.hidden_dim = 8;
        cfg.n_layers = 2;
        cfg.state_dim = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = tiny_model(10);
        let d1 = temp_dir("a");
        let d2 = temp_dir("b");
        model.save_checkpoint(&d1).unwrap();
        let loaded = Model::load_checkpoint(&d1).unwrap();
        loaded.save_checkpoint(&d2).unwrap();
        let b1 = fs::read(d1.join(WEIGHTS_FILE)).unwrap();
        let b2 = fs::read(d2.join(WEIGHTS_FILE)).unwrap();
        assert_eq!(b1, b2);
        let _ = fs::remove_dir_all(d1);
        let _ = fs::remove_dir_all(d2);
    }

    #[test]
    fn loaded_model_forward_is_stable() {
        // forward(load(save(m))) run twice gives bit-identical outputs, and
        // one more save/load round trip changes nothing.
        let mut model = tiny_model(11);
        model.head_w = NdArray::from_fn(&[8, 2], |i| (i as f64 * 0.11).sin());
        let dir = temp_dir("c");
        model.save_checkpoint(&dir).unwrap();
        let loaded = Model::load_checkpoint(&dir).unwrap();
        let input = NdArray::from_fn(&[8, 8, 1], |i| ((i % 5) as f64) / 5.0);
        let a = loaded.forward(&input).unwrap();
        let b = loaded.forward(&input).unwrap();
        assert_eq!(a, b);
        let dir2 = temp_dir("d");
        loaded.save_checkpoint(&dir2).unwrap();
        let again = Model::load_checkpoint(&dir2).unwrap();
        assert_eq!(a, again.forward(&input).unwrap());
        let _ = fs::remove_dir_all(dir);
        let _ = fs::remove_dir_all(dir2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let model = tiny_model(12);
        let dir = temp_dir("e");
        model.save_checkpoint(&dir).unwrap();
        let mut other = tiny_model(13);
        other.config.hidden_dim = 16;
        // Reinit with a different width, then try to load the old weights.
        let mut cfg = other.config.clone();
        cfg.hidden_dim = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut wrong = Model::init(cfg, &mut rng).unwrap();
        assert!(wrong.load_weights(&dir).is_err());
        let _ = fs::remove_dir_all(dir);
    }
}
