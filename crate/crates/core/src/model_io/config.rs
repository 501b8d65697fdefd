use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::container::Tensor;
use crate::error::{CciError, Result};

/// Non-linearity used inside the transformer MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x * sigmoid(1.702 x)`, used by the original CLIP checkpoints.
    #[default]
    QuickGelu,
    /// Exact erf-based GELU.
    Gelu,
}

/// Sidecar config as stored on disk. Fields that can be recovered from tensor
/// shapes are optional; when given they must agree with the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_dim: Option<usize>,
    pub preprocess_mean: [f32; 3],
    pub preprocess_std: [f32; 3],
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f32,
    #[serde(default)]
    pub activation: Activation,
}

fn default_eps() -> f32 {
    1e-5
}

/// Validated encoder architecture and preprocessing constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub projection_dim: usize,
    pub preprocess_mean: [f32; 3],
    pub preprocess_std: [f32; 3],
    pub layer_norm_eps: f32,
    pub activation: Activation,
}

/// CLIP's published RGB normalization constants.
pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

impl ViTConfig {
    /// Patches per side of the square grid.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens `N`.
    pub fn patch_count(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CciError::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 {
            return fail("image_size and patch_size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.layers == 0 {
            return fail("at least one transformer layer is required".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.mlp_dim == 0 || self.projection_dim == 0 {
            return fail("mlp_dim and projection_dim must be positive".into());
        }
        if self.preprocess_std.iter().any(|s| !(*s > 0.0)) {
            return fail("preprocess_std entries must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn to_sidecar(&self) -> SidecarConfig {
        SidecarConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            layers: self.layers,
            heads: self.heads,
            embed_dim: Some(self.embed_dim),
            mlp_dim: Some(self.mlp_dim),
            projection_dim: Some(self.projection_dim),
            preprocess_mean: self.preprocess_mean,
            preprocess_std: self.preprocess_std,
            layer_norm_eps: self.layer_norm_eps,
            activation: self.activation,
        }
    }

    /// Every tensor the encoder reads, with its exact shape.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let n = self.patch_count();
        let p = self.patch_size;
        let mut out = vec![
            (names::CLASS_EMBEDDING.to_string(), vec![d]),
            (names::PATCH_EMBEDDING.to_string(), vec![d, 3, p, p]),
            (names::POSITION_EMBEDDING.to_string(), vec![n + 1, d]),
            (names::PRE_NORM_WEIGHT.to_string(), vec![d]),
            (names::PRE_NORM_BIAS.to_string(), vec![d]),
        ];
        for l in 0..self.layers {
            let layer = names::layer(l);
            for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                out.push((format!("{layer}.self_attn.{proj}.weight"), vec![d, d]));
                out.push((format!("{layer}.self_attn.{proj}.bias"), vec![d]));
            }
            for norm in ["layer_norm1", "layer_norm2"] {
                out.push((format!("{layer}.{norm}.weight"), vec![d]));
                out.push((format!("{layer}.{norm}.bias"), vec![d]));
            }
            out.push((format!("{layer}.mlp.fc1.weight"), vec![self.mlp_dim, d]));
            out.push((format!("{layer}.mlp.fc1.bias"), vec![self.mlp_dim]));
            out.push((format!("{layer}.mlp.fc2.weight"), vec![d, self.mlp_dim]));
            out.push((format!("{layer}.mlp.fc2.bias"), vec![d]));
        }
        out.push((names::POST_NORM_WEIGHT.to_string(), vec![d]));
        out.push((names::POST_NORM_BIAS.to_string(), vec![d]));
        out.push((names::PROJECTION.to_string(), vec![self.projection_dim, d]));
        out
    }

    /// Combines the sidecar with the shapes found in the container. Any
    /// disagreement between the two is reported, never overridden.
    pub fn derive(sidecar: &SidecarConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let shape_of = |name: &str| {
            tensors
                .get(name)
                .map(|t| t.shape.clone())
                .ok_or_else(|| CciError::MissingTensor(name.to_string()))
        };
        let patch = shape_of(names::PATCH_EMBEDDING)?;
        if patch.len() != 4 || patch[2] != patch[3] {
            return Err(CciError::Config(format!(
                "`{}` must have shape [d, channels, p, p], found {patch:?}",
                names::PATCH_EMBEDDING
            )));
        }
        let (d, channels, p) = (patch[0], patch[1], patch[2]);
        if channels != 3 {
            return Err(CciError::Config(format!(
                "patch projection expects {channels} input channels, only RGB (3) is supported"
            )));
        }
        if p != sidecar.patch_size {
            return Err(CciError::Config(format!(
                "sidecar patch_size {} contradicts patch projection kernel {p}",
                sidecar.patch_size
            )));
        }
        check_field("embed_dim", sidecar.embed_dim, d)?;

        let fc1 = shape_of(&format!("{}.mlp.fc1.weight", names::layer(0)))?;
        let mlp_dim = fc1[0];
        check_field("mlp_dim", sidecar.mlp_dim, mlp_dim)?;

        let proj = shape_of(names::PROJECTION)?;
        let projection_dim = proj[0];
        check_field("projection_dim", sidecar.projection_dim, projection_dim)?;

        let present_layers = (0..)
            .take_while(|l| tensors.contains_key(&format!("{}.layer_norm1.weight", names::layer(*l))))
            .count();
        if present_layers != sidecar.layers {
            return Err(CciError::Config(format!(
                "sidecar declares {} layers but container holds {present_layers}",
                sidecar.layers
            )));
        }

        let config = ViTConfig {
            image_size: sidecar.image_size,
            patch_size: p,
            layers: sidecar.layers,
            heads: sidecar.heads,
            embed_dim: d,
            mlp_dim,
            projection_dim,
            preprocess_mean: sidecar.preprocess_mean,
            preprocess_std: sidecar.preprocess_std,
            layer_norm_eps: sidecar.layer_norm_eps,
            activation: sidecar.activation,
        };
        config.validate()?;
        Ok(config)
    }
}

fn check_field(field: &str, declared: Option<usize>, found: usize) -> Result<()> {
    match declared {
        Some(v) if v != found => Err(CciError::Config(format!(
            "sidecar {field} {v} contradicts tensor shapes ({found})"
        ))),
        _ => Ok(()),
    }
}

/// Canonical tensor names (HF `CLIPVisionModelWithProjection` layout).
pub mod names {
    pub const CLASS_EMBEDDING: &str = "vision_model.embeddings.class_embedding";
    pub const PATCH_EMBEDDING: &str = "vision_model.embeddings.patch_embedding.weight";
    pub const POSITION_EMBEDDING: &str = "vision_model.embeddings.position_embedding.weight";
    pub const PRE_NORM_WEIGHT: &str = "vision_model.pre_layrnorm.weight";
    pub const PRE_NORM_BIAS: &str = "vision_model.pre_layrnorm.bias";
    pub const POST_NORM_WEIGHT: &str = "vision_model.post_layernorm.weight";
    pub const POST_NORM_BIAS: &str = "vision_model.post_layernorm.bias";
    pub const PROJECTION: &str = "visual_projection.weight";

    pub fn layer(index: usize) -> String {
        format!("vision_model.encoder.layers.{index}")
    }
}
