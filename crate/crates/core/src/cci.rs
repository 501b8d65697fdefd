//! Cluster importance scoring and importance-map assembly.
//!
//! For an image and a text embedding `t`, the unmasked CLS gives the base
//! similarity `s`. Each cluster `k` is attenuated in turn, giving `s_k` and
//! the drop `s - s_k`. Drops are normalized by their sum into weights, and
//! the patch-grid map assigns every patch the weight of its cluster.

use std::io::Cursor;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageEncoder, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{self, ClusterSet, KMeansConfig, DEFAULT_K};
use crate::encoder::MaskedEncoder;
use crate::error::{CciError, Result};
use crate::model_io::ImageTensor;
use crate::resample;

/// Below this absolute drop sum the weights fall back to uniform.
pub const DEGENERATE_DROP_SUM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CciConfig {
    pub k: usize,
    pub seed: u64,
    pub kmeans: KMeansConfig,
    /// Normalize only the positive drops; negative drops get weight zero.
    pub clamp_negative: bool,
    pub upsample: UpsampleMode,
}

impl Default for CciConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            seed: 0,
            kmeans: KMeansConfig::default(),
            clamp_negative: false,
            upsample: UpsampleMode::Bilinear,
        }
    }
}

/// Cosine similarity, accumulated in `f64`.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(CciError::dim(u.len(), v.len(), "cosine operands"));
    }
    let (mut dot, mut uu, mut vv) = (0f64, 0f64, 0f64);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (f64::from(*a), f64::from(*b));
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(CciError::ZeroNorm);
    }
    Ok(dot / (uu.sqrt() * vv.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScore {
    pub base_similarity: f64,
    pub cluster_similarities: Vec<f64>,
    pub drops: Vec<f64>,
    pub weights: Vec<f64>,
    pub degenerate: bool,
}

impl ImportanceScore {
    /// Normalizes drops into weights, falling back to uniform weights when
    /// the (possibly clamped) drop sum is below [`DEGENERATE_DROP_SUM`].
    pub fn from_similarities(base: f64, cluster_similarities: Vec<f64>, clamp_negative: bool) -> Self {
        let drops: Vec<f64> = cluster_similarities.iter().map(|s_k| base - s_k).collect();
        let used: Vec<f64> = if clamp_negative {
            drops.iter().map(|d| d.max(0.0)).collect()
        } else {
            drops.clone()
        };
        let total: f64 = used.iter().sum();
        let k = drops.len();
        let degenerate = total.abs() < DEGENERATE_DROP_SUM;
        let weights = if degenerate {
            vec![1.0 / k as f64; k]
        } else {
            used.iter().map(|d| d / total).collect()
        };
        Self {
            base_similarity: base,
            cluster_similarities,
            drops,
            weights,
            degenerate,
        }
    }
}

/// A real-valued map over a square pixel lattice, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMap {
    pub size: usize,
    pub values: Vec<f64>,
}

impl PixelMap {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(CciError::dim(size * size, values.len(), "pixel map"));
        }
        Ok(Self { size, values })
    }

    pub fn constant(size: usize, value: f64) -> Self {
        Self {
            size,
            values: vec![value; size * size],
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            size: self.size,
            values: self.values.iter().map(|v| f(*v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    /// Side of the patch lattice.
    pub side: usize,
    /// Patch-lattice map, row-major.
    pub grid: Vec<f64>,
    pub pixel_map: PixelMap,
    pub score: ImportanceScore,
    pub clusters: ClusterSet,
}

impl ImportanceMap {
    pub fn weight(&self, k: usize) -> f64 {
        self.score.weights[k]
    }
}

/// Paints each patch with the weight of its cluster.
pub fn assemble_grid(clusters: &ClusterSet, weights: &[f64]) -> Vec<f64> {
    clusters.assignment.iter().map(|a| weights[*a]).collect()
}

/// Runs the full pipeline: unmasked pass, clustering of its patch features,
/// one masked pass per cluster (concurrently, reduced in cluster order), and
/// map assembly.
pub fn compute_cci<E: MaskedEncoder>(
    encoder: &E,
    image: &ImageTensor,
    text: &[f32],
    config: &CciConfig,
) -> Result<ImportanceMap> {
    let n = encoder.patch_count();
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(CciError::InvalidArgument(format!("{n} patches do not form a square grid")));
    }
    let embedded = encoder.embed(image)?;
    let base = encoder.encode_embedded(&embedded, None)?;
    let s = cosine(&base.cls, text)?;

    let clusters = cluster::kmeans(base.patches.view(), config.k, config.seed, &config.kmeans)?;
    let masks = clusters.masks();
    let cluster_similarities = masks
        .par_iter()
        .map(|mask| {
            let out = encoder.encode_embedded(&embedded, Some(mask))?;
            cosine(&out.cls, text)
        })
        .collect::<Result<Vec<f64>>>()?;

    let score = ImportanceScore::from_similarities(s, cluster_similarities, config.clamp_negative);
    let grid = assemble_grid(&clusters, &score.weights);
    let pixel_map = upsample(&grid, side, encoder.image_size(), config.upsample)?;
    Ok(ImportanceMap {
        side,
        grid,
        pixel_map,
        score,
        clusters,
    })
}

/// Upsamples a `side x side` grid to `size x size` pixels.
pub fn upsample(grid: &[f64], side: usize, size: usize, mode: UpsampleMode) -> Result<PixelMap> {
    if grid.len() != side * side || side == 0 {
        return Err(CciError::dim(side * side, grid.len(), "importance grid"));
    }
    let values = match mode {
        UpsampleMode::Bilinear => resample::bilinear_plane(grid, side, side, size, size),
        UpsampleMode::Nearest => resample::nearest_plane(grid, side, side, size, size),
    };
    PixelMap::new(size, values)
}

/// Diverging blue-white-red colormap: 0 is blue, 0.5 white, 1 red.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let to_u8 = |v: f64| (v * 255.0).round() as u8;
    if t <= 0.5 {
        let a = t / 0.5;
        [to_u8(a), to_u8(a), 255]
    } else {
        let a = (1.0 - t) / 0.5;
        [255, to_u8(a), to_u8(a)]
    }
}

pub const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub png: Vec<u8>,
    pub image: RgbImage,
    /// The map was constant, so it was drawn as a uniform mid-colour tint.
    pub degenerate: bool,
}

/// Min-max normalizes the map, colours it and alpha-blends it over `raster`.
pub fn render_overlay(raster: &RgbImage, map: &PixelMap) -> Result<Overlay> {
    let (w, h) = raster.dimensions();
    if w as usize != map.size || h as usize != map.size {
        return Err(CciError::InvalidArgument(format!(
            "raster {w}x{h} does not match map {0}x{0}",
            map.size
        )));
    }
    let (lo, hi) = map
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let degenerate = !(hi > lo);
    let blended = RgbImage::from_fn(w, h, |x, y| {
        let v = map.values[y as usize * map.size + x as usize];
        let t = if degenerate { 0.5 } else { (v - lo) / (hi - lo) };
        let tint = colormap(t);
        let base = raster.get_pixel(x, y).0;
        image::Rgb([0, 1, 2].map(|c| {
            (OVERLAY_ALPHA * f64::from(tint[c]) + (1.0 - OVERLAY_ALPHA) * f64::from(base[c])).round() as u8
        }))
    });
    let png = encode_png(&blended)?;
    Ok(Overlay {
        png,
        image: blended,
        degenerate,
    })
}

/// PNG encoding with pinned compression and filter settings.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    PngEncoder::new_with_quality(&mut out, CompressionType::Default, FilterType::Adaptive).write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(out.into_inner())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub size: usize,
    pub s_k: f64,
    pub delta: f64,
    pub w: f64,
}

/// Per-image JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CciReport {
    pub label: String,
    pub s: f64,
    pub clusters: Vec<ClusterReport>,
    pub degenerate: bool,
    pub seed: u64,
    #[serde(rename = "K")]
    pub k: usize,
}

impl CciReport {
    pub fn new(label: impl Into<String>, map: &ImportanceMap) -> Self {
        let sizes = map.clusters.sizes();
        let score = &map.score;
        Self {
            label: label.into(),
            s: score.base_similarity,
            clusters: (0..map.clusters.k)
                .map(|k| ClusterReport {
                    k,
                    size: sizes[k],
                    s_k: score.cluster_similarities[k],
                    delta: score.drops[k],
                    w: score.weights[k],
                })
                .collect(),
            degenerate: score.degenerate,
            seed: map.clusters.seed,
            k: map.clusters.k,
        }
    }
}
