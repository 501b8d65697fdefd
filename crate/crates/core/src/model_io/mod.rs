//! Loading encoder weights, text-embedding banks and preprocessing inputs.
//!
//! A model is a pair of files: the named-tensor container (see
//! [`container`]) and a sidecar JSON config next to it with the same stem
//! (`model.safetensors` + `model.json`). Tensor names follow the table in
//! [`ViTConfig::expected_tensors`]; every entry must be present with exactly
//! the listed shape.

pub mod bank;
pub mod config;
pub mod container;
pub mod preprocess;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use bank::{load_text_bank, BankEntry, TextEmbeddingBank};
pub use config::{Activation, SidecarConfig, ViTConfig, CLIP_MEAN, CLIP_STD};
pub use container::{Container, Tensor};
pub use preprocess::{preprocess, ImageTensor};

use crate::error::{CciError, Result};

/// Immutable encoder weights plus their validated configuration.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    config: ViTConfig,
    tensors: BTreeMap<String, Tensor>,
    provenance: String,
}

impl ModelBundle {
    /// Builds a bundle from in-memory tensors, validating the layout.
    pub fn from_tensors(
        config: ViTConfig,
        tensors: BTreeMap<String, Tensor>,
        provenance: String,
    ) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.expected_tensors() {
            let tensor = tensors
                .get(&name)
                .ok_or_else(|| CciError::MissingTensor(name.clone()))?;
            if tensor.shape != shape {
                return Err(CciError::ShapeMismatch {
                    name,
                    expected: shape,
                    found: tensor.shape.clone(),
                });
            }
            if tensor.data.iter().any(|v| !v.is_finite()) {
                return Err(CciError::NonFinite("model weights"));
            }
        }
        Ok(Self {
            config,
            tensors,
            provenance,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    /// Hex SHA-256 of the container bytes the bundle was loaded from.
    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| CciError::MissingTensor(name.to_string()))
    }

    /// Randomly initialised bundle for tests and demos. Weights are uniform
    /// with variance `1 / fan_in`; norm gains sit near one.
    pub fn synthetic(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.expected_tensors() {
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = if name.contains("norm") && name.ends_with(".weight") {
                (0..numel).map(|_| 1.0 + rng.gen_range(-0.1..0.1)).collect()
            } else if name.ends_with(".bias") {
                (0..numel).map(|_| rng.gen_range(-0.1..0.1)).collect()
            } else {
                let fan_in = if shape.len() > 1 {
                    shape[1..].iter().product::<usize>()
                } else {
                    1
                };
                let bound = (3.0 / fan_in as f32).sqrt();
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            tensors.insert(name, Tensor { shape, data });
        }
        Self::from_tensors(config, tensors, format!("synthetic-seed-{seed}"))
    }
}

/// Sidecar config path for a container path (`x.safetensors` -> `x.json`).
pub fn sidecar_path(container_path: &Path) -> PathBuf {
    container_path.with_extension("json")
}

/// Loads a model container and its sidecar config.
pub fn load_model(path: &Path) -> Result<ModelBundle> {
    load_model_with_config(path, &sidecar_path(path))
}

pub fn load_model_with_config(path: &Path, config_path: &Path) -> Result<ModelBundle> {
    let (container, bytes) = container::read(path)?;
    let sidecar_bytes = std::fs::read(config_path).map_err(|e| CciError::io(config_path, e))?;
    let sidecar: SidecarConfig = serde_json::from_slice(&sidecar_bytes)?;
    let config = ViTConfig::derive(&sidecar, &container.tensors)?;
    let digest = hex_digest(&bytes);
    ModelBundle::from_tensors(config, container.tensors, digest)
}

/// Writes the container and sidecar config. Reading them back with
/// [`load_model`] reproduces every tensor bit-exactly.
pub fn save_model(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let container = Container {
        tensors: bundle.tensors.clone(),
        metadata: BTreeMap::new(),
    };
    container::write(&container, path)?;
    let sidecar = serde_json::to_vec_pretty(&bundle.config.to_sidecar())?;
    let side = sidecar_path(path);
    std::fs::write(&side, sidecar).map_err(|e| CciError::io(side, e))
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ViTConfig {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            layers: 2,
            heads: 2,
            embed_dim: 16,
            mlp_dim: 32,
            projection_dim: 12,
            preprocess_mean: CLIP_MEAN,
            preprocess_std: CLIP_STD,
            layer_norm_eps: 1e-5,
            activation: Activation::QuickGelu,
        }
    }

    #[test]
    fn save_then_load_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.safetensors");
        let bundle = ModelBundle::synthetic(tiny_config(), 3).unwrap();
        save_model(&bundle, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.config(), bundle.config());
        assert_eq!(back.config().patch_count(), 16);
        for (name, t) in bundle.tensors() {
            let u = back.tensor(name).unwrap();
            assert_eq!(t.shape, u.shape);
            assert!(t.data.iter().zip(&u.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(back.provenance().len(), 64);
    }

    #[test]
    fn missing_final_norm_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.safetensors");
        let bundle = ModelBundle::synthetic(tiny_config(), 3).unwrap();
        save_model(&bundle, &path).unwrap();
        let (mut c, _) = container::read(&path).unwrap();
        c.tensors.remove(config::names::POST_NORM_WEIGHT);
        container::write(&c, &path).unwrap();
        match load_model(&path) {
            Err(CciError::MissingTensor(name)) => {
                assert_eq!(name, config::names::POST_NORM_WEIGHT)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let bundle = ModelBundle::synthetic(tiny_config(), 1).unwrap();
        let mut tensors = bundle.tensors().clone();
        tensors.insert(
            config::names::POSITION_EMBEDDING.into(),
            Tensor::new(vec![16, 16], vec![0.0; 256]).unwrap(),
        );
        match ModelBundle::from_tensors(tiny_config(), tensors, String::new()) {
            Err(CciError::ShapeMismatch { expected, found, .. }) => {
                assert_eq!(expected, vec![17, 16]);
                assert_eq!(found, vec![16, 16]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sidecar_contradiction_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.safetensors");
        let bundle = ModelBundle::synthetic(tiny_config(), 3).unwrap();
        save_model(&bundle, &path).unwrap();
        let mut sidecar = bundle.config().to_sidecar();
        sidecar.patch_size = 4;
        std::fs::write(sidecar_path(&path), serde_json::to_vec(&sidecar).unwrap()).unwrap();
        assert!(matches!(load_model(&path), Err(CciError::Config(_))));

        let mut sidecar = bundle.config().to_sidecar();
        sidecar.embed_dim = Some(32);
        std::fs::write(sidecar_path(&path), serde_json::to_vec(&sidecar).unwrap()).unwrap();
        assert!(matches!(load_model(&path), Err(CciError::Config(_))));

        let mut sidecar = bundle.config().to_sidecar();
        sidecar.layers = 3;
        std::fs::write(sidecar_path(&path), serde_json::to_vec(&sidecar).unwrap()).unwrap();
        assert!(matches!(load_model(&path), Err(CciError::Config(_))));
    }
}
