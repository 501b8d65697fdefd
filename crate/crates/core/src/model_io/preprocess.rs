use image::DynamicImage;

use super::config::ViTConfig;
use crate::error::{CciError, Result};
use crate::resample;

/// Standardized image in channel-major (`3 x size x size`) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    size: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * size * size {
            return Err(CciError::dim(3 * size * size, data.len(), "image tensor"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CciError::NonFinite("image tensor"));
        }
        Ok(Self { size, data })
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; 3 * size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Pixels per channel.
    pub fn pixel_count(&self) -> usize {
        self.size * self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.size + y) * self.size + x]
    }

    /// The three channel values of the pixel at row-major index `p`.
    pub fn pixel(&self, p: usize) -> [f32; 3] {
        let plane = self.pixel_count();
        [self.data[p], self.data[plane + p], self.data[2 * plane + p]]
    }

    pub fn set_pixel(&mut self, p: usize, value: [f32; 3]) {
        let plane = self.pixel_count();
        self.data[p] = value[0];
        self.data[plane + p] = value[1];
        self.data[2 * plane + p] = value[2];
    }

    /// Smallest and largest value over all channels.
    pub fn value_range(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(*v), hi.max(*v))
            })
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Resizes to `image_size` squared with a bicubic kernel (no anti-aliasing),
/// scales to `[0, 1]`, then standardizes each channel with the configured
/// mean and std. Grayscale inputs are rejected; alpha is dropped.
pub fn preprocess(image: &DynamicImage, config: &ViTConfig) -> Result<ImageTensor> {
    let rgb = match image {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_) => {
            return Err(CciError::InvalidArgument(
                "expected an RGB raster, got grayscale".into(),
            ))
        }
        DynamicImage::ImageRgb8(img) => img.clone(),
        other => other.to_rgb8(),
    };
    preprocess_rgb(&rgb, config)
}

pub fn preprocess_rgb(rgb: &image::RgbImage, config: &ViTConfig) -> Result<ImageTensor> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(CciError::InvalidArgument("zero-area image".into()));
    }
    let size = config.image_size;
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let plane: Vec<f64> = rgb.pixels().map(|p| f64::from(p.0[c]) / 255.0).collect();
        let resized = resample::bicubic_plane(&plane, w, h, size, size);
        let (mean, std) = (config.preprocess_mean[c], config.preprocess_std[c]);
        data.extend(resized.into_iter().map(|v| (v as f32 - mean) / std));
    }
    ImageTensor::new(size, data)
}
