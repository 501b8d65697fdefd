//! Error-source taxonomy for zero-shot predictions.
//!
//! A misclassification is background-driven when the binarized importance
//! map (computed for the predicted class) overlaps the background more than
//! the foreground. Foreground-driven errors are split by a visual-similarity
//! judge into fine-grained confusions and everything else.

pub mod judge;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use judge::{HttpJudge, HttpJudgeConfig, Judge, OfflineJudge, Verdict, API_KEY_ENV};

use crate::cci::ImportanceMap;
use crate::error::{CciError, Result};
use crate::resample;

pub const DEFAULT_BINARIZE_MASS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(CciError::dim(width * height, bits.len(), "binary mask"));
        }
        Ok(Self { width, height, bits })
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

/// Intersection over union; 0 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(CciError::InvalidArgument(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += usize::from(*x && *y);
        union += usize::from(*x || *y);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Foreground mask at model resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FgMask {
    pub mask: BinaryMask,
    pub source: String,
    /// Segmentation prompt the mask is expected to have been produced with.
    pub prompt: String,
    pub empty_foreground: bool,
}

pub fn segmentation_prompt(class_name: &str) -> String {
    format!("{class_name}, foreground objects")
}

impl FgMask {
    pub fn new(mask: BinaryMask, source: impl Into<String>, class_name: &str) -> Self {
        let empty_foreground = mask.count() == 0;
        Self {
            mask,
            source: source.into(),
            prompt: segmentation_prompt(class_name),
            empty_foreground,
        }
    }

    /// Reads a mask image (any nonzero luma is foreground) and resizes it to
    /// `size x size` with nearest-neighbour sampling.
    pub fn load(path: &Path, size: usize, class_name: &str) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w == 0 || h == 0 {
            return Err(CciError::InvalidArgument(format!("empty mask {}", path.display())));
        }
        let bits: Vec<bool> = img.pixels().map(|p| p.0[0] != 0).collect();
        let resized = resample::nearest_plane(&bits, w, h, size, size);
        let mask = BinaryMask::new(size, size, resized)?;
        if mask.count() == 0 {
            log::warn!("mask {} has no foreground", path.display());
        }
        Ok(Self::new(mask, format!("file:{}", path.display()), class_name))
    }

    pub fn background(&self) -> BinaryMask {
        self.mask.complement()
    }
}

/// Selects clusters by descending weight (ties to the lower index) until
/// their cumulative weight reaches `mass` of the total positive weight, and
/// returns the chosen cluster indices. At least one cluster is chosen.
pub fn select_clusters(weights: &[f64], mass: f64) -> Result<Vec<usize>> {
    let positive: f64 = weights.iter().filter(|w| **w > 0.0).sum();
    if !(positive > 0.0) {
        return Err(CciError::InvalidArgument("importance map has no positive weight".into()));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|a, b| weights[*b].total_cmp(&weights[*a]).then(a.cmp(b)));
    let mut chosen = Vec::new();
    let mut cumulative = 0.0;
    for k in order {
        chosen.push(k);
        cumulative += weights[k];
        if cumulative >= mass * positive {
            break;
        }
    }
    Ok(chosen)
}

/// Pixel mask of the most important clusters, or `None` when the map is
/// degenerate or has no positive weight.
pub fn binarize_heatmap(map: &ImportanceMap, mass: f64) -> Option<BinaryMask> {
    if map.score.degenerate {
        return None;
    }
    let chosen = select_clusters(&map.score.weights, mass).ok()?;
    let grid: Vec<bool> = map.clusters.assignment.iter().map(|a| chosen.contains(a)).collect();
    let size = map.pixel_map.size;
    let bits = resample::nearest_plane(&grid, map.side, map.side, size, size);
    BinaryMask::new(size, size, bits).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Correct,
    #[serde(rename = "BG-Er")]
    BgEr,
    #[serde(rename = "Fine-Er")]
    FineEr,
    #[serde(rename = "Other-FG-Er")]
    OtherFgEr,
    Degenerate,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Correct,
        Category::BgEr,
        Category::FineEr,
        Category::OtherFgEr,
        Category::Degenerate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Correct => "Correct",
            Category::BgEr => "BG-Er",
            Category::FineEr => "Fine-Er",
            Category::OtherFgEr => "Other-FG-Er",
            Category::Degenerate => "Degenerate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub image_id: String,
    pub gt: String,
    pub pred: String,
    pub correct: bool,
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub category: Category,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge_verdict: Option<Verdict>,
}

/// Applies the decision rules. `map` must be computed for the predicted
/// class. FG/BG ties count as foreground-driven.
pub fn classify<J: Judge + ?Sized>(
    image_id: &str,
    map: &ImportanceMap,
    fg: &FgMask,
    gt: &str,
    pred: &str,
    judge: &J,
    mass: f64,
) -> Result<ErrorRecord> {
    let correct = gt == pred;
    let mut record = ErrorRecord {
        image_id: image_id.to_string(),
        gt: gt.to_string(),
        pred: pred.to_string(),
        correct,
        iou_fg: 0.0,
        iou_bg: 0.0,
        category: Category::Correct,
        judge_verdict: None,
    };
    let binarized = binarize_heatmap(map, mass);
    if let Some(b) = &binarized {
        record.iou_fg = iou(b, &fg.mask)?;
        record.iou_bg = iou(b, &fg.background())?;
    }
    if correct {
        return Ok(record);
    }
    if binarized.is_none() {
        record.category = Category::Degenerate;
        return Ok(record);
    }
    if record.iou_bg > record.iou_fg {
        record.category = Category::BgEr;
        return Ok(record);
    }
    let verdict = judge.judge(gt, pred)?;
    record.judge_verdict = Some(verdict);
    record.category = match verdict {
        Verdict::Similar => Category::FineEr,
        Verdict::Different => Category::OtherFgEr,
    };
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub category: Category,
    pub count: usize,
    pub fraction_all: f64,
    pub fraction_errors: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyReport {
    pub records: usize,
    pub errors: usize,
    pub categories: Vec<CategoryShare>,
    /// Fine-Er plus Other-FG-Er, over errors.
    pub fg_er_fraction_errors: f64,
}

impl TaxonomyReport {
    pub fn share(&self, category: Category) -> &CategoryShare {
        self.categories
            .iter()
            .find(|c| c.category == category)
            .expect("every category is reported")
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["category", "count", "fraction_all", "fraction_errors"])?;
        for c in &self.categories {
            w.write_record([
                c.category.as_str().to_string(),
                c.count.to_string(),
                c.fraction_all.to_string(),
                c.fraction_errors.to_string(),
            ])?;
        }
        w.into_inner()
            .map_err(|e| CciError::InvalidArgument(format!("csv flush failed: {e}")))
    }
}

/// Category fractions over all records and over errors only.
pub fn aggregate_taxonomy(records: &[ErrorRecord]) -> Result<TaxonomyReport> {
    if records.is_empty() {
        return Err(CciError::InvalidArgument("no records to aggregate".into()));
    }
    let mut counts: BTreeMap<Category, usize> = Category::ALL.iter().map(|c| (*c, 0)).collect();
    for r in records {
        *counts.get_mut(&r.category).expect("known category") += 1;
    }
    let total = records.len();
    let errors = total - counts[&Category::Correct];
    let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let categories = Category::ALL
        .iter()
        .map(|c| {
            let count = counts[c];
            CategoryShare {
                category: *c,
                count,
                fraction_all: frac(count, total),
                fraction_errors: if *c == Category::Correct { 0.0 } else { frac(count, errors) },
            }
        })
        .collect();
    Ok(TaxonomyReport {
        records: total,
        errors,
        categories,
        fg_er_fraction_errors: frac(counts[&Category::FineEr] + counts[&Category::OtherFgEr], errors),
    })
}
