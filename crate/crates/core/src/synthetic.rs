//! Small analytic stand-ins for the real encoder and scorer, used to check
//! localization and faithfulness behaviour where the right answer is known
//! in closed form.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{ClusterMask, EncodedImage, MaskedEncoder};
use crate::error::{CciError, Result};
use crate::faith::ImageScorer;
use crate::model_io::ImageTensor;

/// Linear encoder whose CLS is `bias + (1/|B|) * sum of unmasked block
/// tokens`, where `B` is a fixed set of patches and each token is the mean
/// colour of its patch. Patch features are the tokens themselves, so masking
/// never changes them.
#[derive(Debug, Clone)]
pub struct PlantedBlockEncoder {
    image_size: usize,
    patch_size: usize,
    block: Vec<usize>,
    bias: [f32; 4],
}

impl PlantedBlockEncoder {
    pub fn new(image_size: usize, patch_size: usize, block: Vec<usize>, bias: [f32; 4]) -> Result<Self> {
        let side = image_size / patch_size;
        if side * patch_size != image_size || block.is_empty() || block.iter().any(|b| *b >= side * side) {
            return Err(CciError::InvalidArgument("invalid planted block layout".into()));
        }
        Ok(Self {
            image_size,
            patch_size,
            block,
            bias,
        })
    }

    pub fn block(&self) -> &[usize] {
        &self.block
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Mean colour of each patch, padded with a zero fourth component.
    pub fn tokens(&self, image: &ImageTensor) -> Vec<[f32; 4]> {
        let side = self.grid_side();
        let p = self.patch_size;
        let area = (p * p) as f32;
        (0..side * side)
            .map(|j| {
                let (gy, gx) = (j / side, j % side);
                let mut t = [0f32; 4];
                for (c, slot) in t.iter_mut().take(3).enumerate() {
                    let mut sum = 0.0;
                    for y in gy * p..(gy + 1) * p {
                        for x in gx * p..(gx + 1) * p {
                            sum += image.get(c, y, x);
                        }
                    }
                    *slot = sum / area;
                }
                t
            })
            .collect()
    }

    /// CLS for the given tokens with the patches in `removed` attenuated.
    pub fn cls_without(&self, tokens: &[[f32; 4]], removed: impl Fn(usize) -> bool) -> Vec<f32> {
        let mut cls = self.bias;
        let scale = 1.0 / self.block.len() as f32;
        for &j in &self.block {
            if !removed(j) {
                for c in 0..4 {
                    cls[c] += scale * tokens[j][c];
                }
            }
        }
        cls.to_vec()
    }
}

impl MaskedEncoder for PlantedBlockEncoder {
    type Embedded = Vec<[f32; 4]>;

    fn image_size(&self) -> usize {
        self.image_size
    }

    fn patch_count(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    fn embed(&self, image: &ImageTensor) -> Result<Self::Embedded> {
        self.check_image(image)?;
        Ok(self.tokens(image))
    }

    fn encode_embedded(&self, tokens: &Self::Embedded, mask: Option<&ClusterMask>) -> Result<EncodedImage> {
        self.check_mask(mask)?;
        let cls = self.cls_without(tokens, |j| mask.is_some_and(|m| m.is_masked(j)));
        let patches = Array2::from_shape_fn((tokens.len(), 3), |(j, c)| tokens[j][c]);
        Ok(EncodedImage {
            cls,
            patches,
            mask_applied: mask.cloned(),
            all_patches_masked: mask.is_some_and(ClusterMask::covers_all),
        })
    }
}

/// Colour painted into planted-block patches.
pub const PLANTED_COLOR: [f32; 3] = [1.8, -1.2, 0.9];

/// An image whose block patches are near [`PLANTED_COLOR`] and whose other
/// patches are random colours, each patch with small per-pixel jitter.
pub fn planted_image(image_size: usize, patch_size: usize, block: &[usize], seed: u64) -> ImageTensor {
    let side = image_size / patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colors: Vec<[f32; 3]> = (0..side * side)
        .map(|j| {
            if block.contains(&j) {
                PLANTED_COLOR.map(|v| v + rng.gen_range(-0.05..0.05))
            } else {
                [0; 3].map(|_| rng.gen_range(-1.0..1.0))
            }
        })
        .collect();
    let mut img = ImageTensor::zeros(image_size);
    for y in 0..image_size {
        for x in 0..image_size {
            let base = colors[(y / patch_size) * side + x / patch_size];
            let v = base.map(|c| c + rng.gen_range(-0.02..0.02));
            img.set_pixel(y * image_size + x, v);
        }
    }
    img
}

/// Scorer that ranks the truth first exactly when at least `threshold` of a
/// designated pixel region still holds its original values, and last
/// otherwise.
#[derive(Debug, Clone)]
pub struct RegionScorer {
    labels: Vec<String>,
    truth: usize,
    original: ImageTensor,
    region: Vec<usize>,
    threshold: f64,
}

impl RegionScorer {
    pub fn new(labels: Vec<String>, truth: usize, original: ImageTensor, region: Vec<usize>, threshold: f64) -> Self {
        Self {
            labels,
            truth,
            original,
            region,
            threshold,
        }
    }

    pub fn intact_fraction(&self, image: &ImageTensor) -> f64 {
        let intact = self
            .region
            .iter()
            .filter(|p| image.pixel(**p) == self.original.pixel(**p))
            .count();
        intact as f64 / self.region.len() as f64
    }
}

impl ImageScorer for RegionScorer {
    fn candidate_labels(&self) -> &[String] {
        &self.labels
    }

    fn scores(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let hit = self.intact_fraction(image) >= self.threshold;
        Ok((0..self.labels.len())
            .map(|i| match (i == self.truth, hit) {
                (true, true) => 1.0,
                (true, false) => -1.0,
                _ => 0.0,
            })
            .collect())
    }
}

/// Pixel indices of an axis-aligned rectangle `[x0, x1) x [y0, y1)`.
pub fn rect_pixels(size: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Vec<usize> {
    (y0..y1).flat_map(|y| (x0..x1).map(move |x| y * size + x)).collect()
}
