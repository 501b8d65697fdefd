//! Image encoders that can run with a cluster mask applied to attention.
//!
//! A mask marks patch tokens whose keys are removed from every attention
//! row, at every layer and head. The CLS token is never maskable.

mod vit;

use ndarray::{Array2, ArrayView2};

pub use vit::{masked_softmax_row, EncoderOptions, FeatureLayer, VitEncoder};

use crate::error::{CciError, Result};
use crate::model_io::ImageTensor;

/// One flag per patch; `true` means the patch is attenuated.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClusterMask {
    bits: Vec<bool>,
}

impl ClusterMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn none(patch_count: usize) -> Self {
        Self {
            bits: vec![false; patch_count],
        }
    }

    pub fn from_indices(patch_count: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![false; patch_count];
        for i in indices {
            bits[i] = true;
        }
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.bits[patch]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn covers_all(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    pub fn masked_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }
}

/// Token states after some layer; row 0 is CLS.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f32>,
    pub layer_index: usize,
}

impl TokenSequence {
    pub fn cls(&self) -> ndarray::ArrayView1<'_, f32> {
        self.tokens.row(0)
    }

    /// The `N x d` patch rows.
    pub fn patches(&self) -> ArrayView2<'_, f32> {
        self.tokens.slice(ndarray::s![1.., ..])
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    /// Projected CLS embedding (not normalized).
    pub cls: Vec<f32>,
    /// Patch features used for clustering, `N x f`.
    pub patches: Array2<f32>,
    pub mask_applied: Option<ClusterMask>,
    /// Set when the mask covered every patch, leaving CLS to attend only to
    /// itself.
    pub all_patches_masked: bool,
}

/// An encoder whose attention can be restricted by a [`ClusterMask`].
///
/// `embed` produces the layer-0 state, which masking never changes; callers
/// that run several masked passes over one image embed once and reuse it.
pub trait MaskedEncoder: Sync {
    type Embedded: Sync + Send;

    fn image_size(&self) -> usize;
    fn patch_count(&self) -> usize;

    fn embed(&self, image: &ImageTensor) -> Result<Self::Embedded>;

    fn encode_embedded(
        &self,
        embedded: &Self::Embedded,
        mask: Option<&ClusterMask>,
    ) -> Result<EncodedImage>;

    fn encode(&self, image: &ImageTensor, mask: Option<&ClusterMask>) -> Result<EncodedImage> {
        let embedded = self.embed(image)?;
        self.encode_embedded(&embedded, mask)
    }

    fn check_mask(&self, mask: Option<&ClusterMask>) -> Result<()> {
        match mask {
            Some(m) if m.len() != self.patch_count() => {
                Err(CciError::dim(self.patch_count(), m.len(), "cluster mask length"))
            }
            _ => Ok(()),
        }
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.size() != self.image_size() {
            return Err(CciError::dim(self.image_size(), image.size(), "image size"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_helpers() {
        let m = ClusterMask::from_indices(5, [1, 3]);
        assert_eq!(m.bits(), &[false, true, false, true, false]);
        assert_eq!(m.count(), 2);
        assert!(!m.covers_all());
        assert_eq!(m.masked_indices().collect::<Vec<_>>(), vec![1, 3]);
        assert!(ClusterMask::new(vec![true; 3]).covers_all());
    }
}
