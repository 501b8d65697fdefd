use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{ClusterMask, EncodedImage, MaskedEncoder, TokenSequence};
use crate::error::{CciError, Result};
use crate::model_io::config::names;
use crate::model_io::{Activation, ImageTensor, ModelBundle, ViTConfig};

/// Which token states are returned as clustering features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureLayer {
    /// Output of the last transformer block.
    #[default]
    Final,
    /// Output of the second-to-last block (the last one for single-layer
    /// models).
    Penultimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderOptions {
    pub feature_layer: FeatureLayer,
    /// Apply the encoder's final normalization to the feature tokens.
    pub feature_post_norm: bool,
}

impl Default for EncoderOptions {
    fn default() -> Self {
        Self {
            feature_layer: FeatureLayer::Final,
            feature_post_norm: true,
        }
    }
}

struct Norm<'a> {
    weight: ArrayView1<'a, f32>,
    bias: ArrayView1<'a, f32>,
}

struct Linear<'a> {
    /// `[out, in]`
    weight: ArrayView2<'a, f32>,
    bias: Option<ArrayView1<'a, f32>>,
}

impl Linear<'_> {
    fn apply(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }
}

struct Block<'a> {
    norm1: Norm<'a>,
    q: Linear<'a>,
    k: Linear<'a>,
    v: Linear<'a>,
    out: Linear<'a>,
    norm2: Norm<'a>,
    fc1: Linear<'a>,
    fc2: Linear<'a>,
}

/// CLIP-style ViT image tower borrowing its weights from a [`ModelBundle`].
pub struct VitEncoder<'a> {
    config: &'a ViTConfig,
    options: EncoderOptions,
    class_embedding: ArrayView1<'a, f32>,
    /// `[d, 3 * p * p]`
    patch_weight: ArrayView2<'a, f32>,
    positions: ArrayView2<'a, f32>,
    pre_norm: Norm<'a>,
    blocks: Vec<Block<'a>>,
    post_norm: Norm<'a>,
    projection: ArrayView2<'a, f32>,
}

fn view1<'a>(bundle: &'a ModelBundle, name: &str) -> Result<ArrayView1<'a, f32>> {
    Ok(ArrayView1::from(bundle.tensor(name)?.data.as_slice()))
}

fn view2<'a>(bundle: &'a ModelBundle, name: &str, rows: usize, cols: usize) -> Result<ArrayView2<'a, f32>> {
    let t = bundle.tensor(name)?;
    ArrayView2::from_shape((rows, cols), t.data.as_slice()).map_err(|_| CciError::ShapeMismatch {
        name: name.to_string(),
        expected: vec![rows, cols],
        found: t.shape.clone(),
    })
}

fn norm<'a>(bundle: &'a ModelBundle, prefix: &str) -> Result<Norm<'a>> {
    Ok(Norm {
        weight: view1(bundle, &format!("{prefix}.weight"))?,
        bias: view1(bundle, &format!("{prefix}.bias"))?,
    })
}

fn linear<'a>(bundle: &'a ModelBundle, prefix: &str, out: usize, inp: usize) -> Result<Linear<'a>> {
    Ok(Linear {
        weight: view2(bundle, &format!("{prefix}.weight"), out, inp)?,
        bias: Some(view1(bundle, &format!("{prefix}.bias"))?),
    })
}

impl<'a> VitEncoder<'a> {
    pub fn new(bundle: &'a ModelBundle) -> Result<Self> {
        Self::with_options(bundle, EncoderOptions::default())
    }

    pub fn with_options(bundle: &'a ModelBundle, options: EncoderOptions) -> Result<Self> {
        let config = bundle.config();
        let d = config.embed_dim;
        let p = config.patch_size;
        let blocks = (0..config.layers)
            .map(|l| {
                let prefix = names::layer(l);
                let attn = format!("{prefix}.self_attn");
                Ok(Block {
                    norm1: norm(bundle, &format!("{prefix}.layer_norm1"))?,
                    q: linear(bundle, &format!("{attn}.q_proj"), d, d)?,
                    k: linear(bundle, &format!("{attn}.k_proj"), d, d)?,
                    v: linear(bundle, &format!("{attn}.v_proj"), d, d)?,
                    out: linear(bundle, &format!("{attn}.out_proj"), d, d)?,
                    norm2: norm(bundle, &format!("{prefix}.layer_norm2"))?,
                    fc1: linear(bundle, &format!("{prefix}.mlp.fc1"), config.mlp_dim, d)?,
                    fc2: linear(bundle, &format!("{prefix}.mlp.fc2"), d, config.mlp_dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            options,
            class_embedding: view1(bundle, names::CLASS_EMBEDDING)?,
            patch_weight: view2(bundle, names::PATCH_EMBEDDING, d, 3 * p * p)?,
            positions: view2(bundle, names::POSITION_EMBEDDING, config.patch_count() + 1, d)?,
            pre_norm: Norm {
                weight: view1(bundle, names::PRE_NORM_WEIGHT)?,
                bias: view1(bundle, names::PRE_NORM_BIAS)?,
            },
            blocks,
            post_norm: Norm {
                weight: view1(bundle, names::POST_NORM_WEIGHT)?,
                bias: view1(bundle, names::POST_NORM_BIAS)?,
            },
            projection: view2(bundle, names::PROJECTION, config.projection_dim, d)?,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        self.config
    }

    fn layer_norm(&self, x: &Array2<f32>, norm: &Norm<'_>) -> Array2<f32> {
        let eps = self.config.layer_norm_eps;
        let d = x.ncols() as f32;
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for ((v, w), b) in row.iter_mut().zip(norm.weight).zip(norm.bias) {
                *v = (*v - mean) * inv * w + b;
            }
        }
        out
    }

    fn activate(&self, x: &mut Array2<f32>) {
        match self.config.activation {
            Activation::QuickGelu => x.mapv_inplace(|v| v / (1.0 + (-1.702 * v).exp())),
            Activation::Gelu => {
                x.mapv_inplace(|v| 0.5 * v * (1.0 + libm::erff(v * std::f32::consts::FRAC_1_SQRT_2)))
            }
        }
    }

    /// Flattens patches row-major over the grid, each patch as
    /// `[channel][ky][kx]` to match the projection kernel layout.
    fn patchify(&self, image: &ImageTensor) -> Array2<f32> {
        let p = self.config.patch_size;
        let side = self.config.grid_side();
        let mut patches = Array2::<f32>::zeros((side * side, 3 * p * p));
        for gy in 0..side {
            for gx in 0..side {
                let mut row = patches.row_mut(gy * side + gx);
                let mut i = 0;
                for c in 0..3 {
                    for ky in 0..p {
                        for kx in 0..p {
                            row[i] = image.get(c, gy * p + ky, gx * p + kx);
                            i += 1;
                        }
                    }
                }
            }
        }
        patches
    }

    fn attention(&self, block: &Block<'_>, h: &Array2<f32>, key_masked: &[bool]) -> Array2<f32> {
        let heads = self.config.heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let q = block.q.apply(h) * scale;
        let k = block.k.apply(h);
        let v = block.v.apply(h);
        let tokens = h.nrows();
        let mut merged = Array2::<f32>::zeros((tokens, self.config.embed_dim));
        for head in 0..heads {
            let cols = s![.., head * hd..(head + 1) * hd];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            for mut row in scores.rows_mut() {
                masked_softmax_row(row.as_slice_mut().expect("contiguous"), key_masked);
            }
            merged.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        }
        block.out.apply(&merged)
    }

    fn run_blocks(&self, embedded: &TokenSequence, mask: Option<&ClusterMask>) -> (Array2<f32>, Option<Array2<f32>>) {
        let n = self.config.patch_count();
        let mut key_masked = vec![false; n + 1];
        if let Some(m) = mask {
            key_masked[1..].copy_from_slice(m.bits());
        }
        let keep_penultimate = self.options.feature_layer == FeatureLayer::Penultimate;
        let penultimate_index = self.blocks.len().saturating_sub(2);

        let mut x = embedded.tokens.clone();
        let mut penultimate = None;
        for (l, block) in self.blocks.iter().enumerate() {
            let h = self.layer_norm(&x, &block.norm1);
            x = x + self.attention(block, &h, &key_masked);
            let h = self.layer_norm(&x, &block.norm2);
            let mut hidden = block.fc1.apply(&h);
            self.activate(&mut hidden);
            x = x + block.fc2.apply(&hidden);
            if keep_penultimate && l == penultimate_index && self.blocks.len() > 1 {
                penultimate = Some(x.clone());
            }
        }
        (x, penultimate)
    }

    /// Final-layer token states, after the final normalization.
    pub fn final_tokens(&self, image: &ImageTensor, mask: Option<&ClusterMask>) -> Result<TokenSequence> {
        self.check_image(image)?;
        self.check_mask(mask)?;
        let embedded = self.embed(image)?;
        let (x, _) = self.run_blocks(&embedded, mask);
        Ok(TokenSequence {
            tokens: self.layer_norm(&x, &self.post_norm),
            layer_index: self.config.layers,
        })
    }

    /// Patch token states used as clustering features, with the CLS row kept
    /// at index 0.
    pub fn patch_tokens(&self, image: &ImageTensor) -> Result<TokenSequence> {
        let embedded = self.embed(image)?;
        let (x, penultimate) = self.run_blocks(&embedded, None);
        Ok(self.feature_tokens(x, penultimate))
    }

    fn feature_tokens(&self, last: Array2<f32>, penultimate: Option<Array2<f32>>) -> TokenSequence {
        let (states, layer_index) = match penultimate {
            Some(p) => (p, self.config.layers - 1),
            None => (last, self.config.layers),
        };
        let tokens = if self.options.feature_post_norm {
            self.layer_norm(&states, &self.post_norm)
        } else {
            states
        };
        TokenSequence { tokens, layer_index }
    }
}

/// Softmax over one row of attention logits with masked keys removed.
///
/// Masked logits become the most negative finite `f32`; the row maximum is
/// subtracted before exponentiation, so masked entries get exactly zero
/// weight and no NaN can appear while at least one key is unmasked.
pub fn masked_softmax_row(row: &mut [f32], key_masked: &[bool]) {
    debug_assert_eq!(row.len(), key_masked.len());
    for (v, masked) in row.iter_mut().zip(key_masked) {
        if *masked {
            *v = f32::MIN;
        }
    }
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl MaskedEncoder for VitEncoder<'_> {
    type Embedded = TokenSequence;

    fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn patch_count(&self) -> usize {
        self.config.patch_count()
    }

    /// Patch projection, class token, position embeddings and the
    /// pre-transformer normalization.
    fn embed(&self, image: &ImageTensor) -> Result<TokenSequence> {
        self.check_image(image)?;
        let patches = self.patchify(image).dot(&self.patch_weight.t());
        let n = self.config.patch_count();
        let d = self.config.embed_dim;
        let mut x = Array2::<f32>::zeros((n + 1, d));
        x.row_mut(0).assign(&self.class_embedding);
        x.slice_mut(s![1.., ..]).assign(&patches);
        x += &self.positions;
        Ok(TokenSequence {
            tokens: self.layer_norm(&x, &self.pre_norm),
            layer_index: 0,
        })
    }

    fn encode_embedded(&self, embedded: &TokenSequence, mask: Option<&ClusterMask>) -> Result<EncodedImage> {
        self.check_mask(mask)?;
        if embedded.tokens.dim() != (self.config.patch_count() + 1, self.config.embed_dim) {
            return Err(CciError::dim(
                self.config.patch_count() + 1,
                embedded.tokens.nrows(),
                "embedded token count",
            ));
        }
        let (last, penultimate) = self.run_blocks(embedded, mask);
        let normed = self.layer_norm(&last, &self.post_norm);
        let cls: Array1<f32> = self.projection.dot(&normed.row(0));
        let features = match (penultimate, self.options.feature_post_norm) {
            (None, true) => normed.slice(s![1.., ..]).to_owned(),
            (p, _) => self.feature_tokens(last, p).tokens.slice(s![1.., ..]).to_owned(),
        };
        debug_assert_eq!(features.len_of(Axis(0)), self.config.patch_count());
        Ok(EncodedImage {
            cls: cls.to_vec(),
            patches: features,
            mask_applied: mask.cloned(),
            all_patches_masked: mask.is_some_and(ClusterMask::covers_all),
        })
    }
}
