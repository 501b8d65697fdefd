//! Deletion and insertion faithfulness curves.
//!
//! Pixels are ranked by importance (descending, ties by row-major index).
//! Step `m` of a schedule has modified the top `floor(m * fraction * P)`
//! pixels of `P`: deletion replaces them with seeded uniform noise drawn
//! over the image's own value range, insertion reveals them from a blank
//! canvas. The scorer runs on every step; a curve records whether the
//! ground truth ranks within the top `k`, and its AUC is the trapezoid rule
//! over the step axis normalized to `[0, 1]`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cci::{cosine, PixelMap};
use crate::encoder::MaskedEncoder;
use crate::error::{CciError, Result};
use crate::model_io::{ImageTensor, TextEmbeddingBank, ViTConfig};

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_FRACTION: f64 = 0.005;

/// Absorbs binary rounding in `m * fraction * P` so exact products floor to
/// themselves.
const COUNT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub steps: usize,
    pub fraction_per_step: f64,
    pub noise_seed: u64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            fraction_per_step: DEFAULT_FRACTION,
            noise_seed: 0,
        }
    }
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.fraction_per_step > 0.0) {
            return Err(CciError::InvalidArgument(
                "schedule needs positive steps and fraction".into(),
            ));
        }
        if self.steps as f64 * self.fraction_per_step > 1.0 + COUNT_EPSILON {
            return Err(CciError::InvalidArgument(format!(
                "schedule modifies more than the whole image ({} x {})",
                self.steps, self.fraction_per_step
            )));
        }
        Ok(())
    }

    /// Pixels modified in total after `step` steps.
    pub fn cumulative_count(&self, step: usize, pixels: usize) -> usize {
        let exact = step as f64 * self.fraction_per_step * pixels as f64;
        ((exact + COUNT_EPSILON).floor() as usize).min(pixels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveMode {
    Deletion,
    Insertion,
}

impl CurveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CurveMode::Deletion => "deletion",
            CurveMode::Insertion => "insertion",
        }
    }
}

/// Starting canvas for insertion.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Blank {
    /// Dataset-mean colour, i.e. zeros in standardized space.
    #[default]
    Mean,
    /// A fixed standardized colour.
    Color([f32; 3]),
    /// Seeded uniform noise over the image's value range.
    Noise,
}

impl Blank {
    /// Black (RGB 0) expressed in the standardized space of `config`.
    pub fn black(config: &ViTConfig) -> Self {
        Blank::Color([0, 1, 2].map(|c| -config.preprocess_mean[c] / config.preprocess_std[c]))
    }
}

/// Scores every candidate (class prompt or caption) for an image.
pub trait ImageScorer: Sync {
    fn candidate_labels(&self) -> &[String];
    fn scores(&self, image: &ImageTensor) -> Result<Vec<f64>>;

    fn index_of(&self, label: &str) -> Option<usize> {
        self.candidate_labels().iter().position(|l| l == label)
    }
}

/// Cosine of the projected CLS against every bank vector.
pub struct EncoderScorer<'a, E> {
    encoder: &'a E,
    bank: &'a TextEmbeddingBank,
    labels: Vec<String>,
}

impl<'a, E: MaskedEncoder> EncoderScorer<'a, E> {
    pub fn new(encoder: &'a E, bank: &'a TextEmbeddingBank) -> Self {
        Self {
            encoder,
            bank,
            labels: bank.labels().map(str::to_string).collect(),
        }
    }
}

impl<E: MaskedEncoder> ImageScorer for EncoderScorer<'_, E> {
    fn candidate_labels(&self) -> &[String] {
        &self.labels
    }

    fn scores(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let encoded = self.encoder.encode(image, None)?;
        self.bank
            .entries()
            .iter()
            .map(|e| cosine(&encoded.cls, &e.vector))
            .collect()
    }
}

/// Candidate indices sorted by score descending; ties keep bank order.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    order
}

/// Zero-based rank of `truth` under [`rank_order`].
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    let t = scores[truth];
    scores
        .iter()
        .enumerate()
        .filter(|(i, s)| **s > t || (**s == t && *i < truth))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub ranked_labels: Vec<String>,
    pub scores: Vec<f64>,
    pub top1_hit: bool,
    pub top5_hit: bool,
}

impl ZeroShotResult {
    pub fn predicted(&self) -> &str {
        &self.ranked_labels[0]
    }
}

pub fn zero_shot<S: ImageScorer + ?Sized>(scorer: &S, image: &ImageTensor, truth: &str) -> Result<ZeroShotResult> {
    let truth_index = scorer
        .index_of(truth)
        .ok_or_else(|| CciError::UnknownLabel(truth.to_string()))?;
    let scores = scorer.scores(image)?;
    let labels = scorer.candidate_labels();
    let rank = rank_of(&scores, truth_index);
    Ok(ZeroShotResult {
        ranked_labels: rank_order(&scores).into_iter().map(|i| labels[i].clone()).collect(),
        scores,
        top1_hit: rank < 1,
        top5_hit: rank < 5,
    })
}

/// Pixel indices by map value descending, ties by row-major index.
pub fn pixel_ranking(map: &PixelMap) -> Vec<usize> {
    let mut order: Vec<usize> = (0..map.values.len()).collect();
    order.sort_by(|a, b| map.values[*b].total_cmp(&map.values[*a]).then(a.cmp(b)));
    order
}

/// Truth rank after each step of a perturbation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub mode: CurveMode,
    pub modified_counts: Vec<usize>,
    pub frac_modified: Vec<f64>,
    pub truth_ranks: Vec<usize>,
}

impl StepTrace {
    pub fn curve(&self, k: usize) -> FaithfulnessCurve {
        FaithfulnessCurve::new(
            self.mode,
            k,
            self.truth_ranks.iter().map(|r| if *r < k { 1.0 } else { 0.0 }).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessCurve {
    pub mode: CurveMode,
    /// Hit threshold: the truth must rank within the top `k`.
    pub k: usize,
    pub values: Vec<f64>,
    pub auc: f64,
}

impl FaithfulnessCurve {
    pub fn new(mode: CurveMode, k: usize, values: Vec<f64>) -> Self {
        let auc = trapezoid_auc(&values);
        Self { mode, k, values, auc }
    }
}

/// Trapezoid area under `values` on an evenly spaced axis over `[0, 1]`.
pub fn trapezoid_auc(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let inner: f64 = values.windows(2).map(|w| w[0] + w[1]).sum();
            inner / (2.0 * (n - 1) as f64)
        }
    }
}

/// Runs a perturbation schedule and records the truth's rank at each step.
pub fn run_steps<S: ImageScorer + ?Sized>(
    mode: CurveMode,
    scorer: &S,
    image: &ImageTensor,
    map: &PixelMap,
    truth_index: usize,
    schedule: &StepSchedule,
    blank: Blank,
) -> Result<StepTrace> {
    schedule.validate()?;
    let pixels = image.pixel_count();
    if map.size != image.size() {
        return Err(CciError::dim(image.size(), map.size, "pixel map size"));
    }
    if truth_index >= scorer.candidate_labels().len() {
        return Err(CciError::InvalidArgument(format!("truth index {truth_index} out of range")));
    }
    let ranking = pixel_ranking(map);
    let (lo, hi) = image.value_range();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.noise_seed);
    let mut noise = move || -> [f32; 3] {
        if hi > lo {
            [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)]
        } else {
            [lo; 3]
        }
    };

    let mut canvas = match mode {
        CurveMode::Deletion => image.clone(),
        CurveMode::Insertion => {
            let mut c = ImageTensor::zeros(image.size());
            match blank {
                Blank::Mean => {}
                Blank::Color(v) => (0..pixels).for_each(|p| c.set_pixel(p, v)),
                Blank::Noise => (0..pixels).for_each(|p| c.set_pixel(p, noise())),
            }
            c
        }
    };

    let evaluate = |canvas: &ImageTensor| -> Result<usize> {
        let scores = scorer.scores(canvas)?;
        Ok(rank_of(&scores, truth_index))
    };

    let mut trace = StepTrace {
        mode,
        modified_counts: vec![0],
        frac_modified: vec![0.0],
        truth_ranks: vec![evaluate(&canvas)?],
    };
    let mut done = 0;
    for step in 1..=schedule.steps {
        let target = schedule.cumulative_count(step, pixels);
        for &p in &ranking[done..target] {
            let value = match mode {
                CurveMode::Deletion => noise(),
                CurveMode::Insertion => image.pixel(p),
            };
            canvas.set_pixel(p, value);
        }
        done = target;
        trace.modified_counts.push(done);
        trace.frac_modified.push(done as f64 / pixels as f64);
        trace.truth_ranks.push(evaluate(&canvas)?);
    }
    Ok(trace)
}

/// Top-1 and top-5 curves from one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePair {
    pub trace: StepTrace,
    pub top1: FaithfulnessCurve,
    pub top5: FaithfulnessCurve,
}

impl CurvePair {
    fn from_trace(trace: StepTrace) -> Self {
        Self {
            top1: trace.curve(1),
            top5: trace.curve(5),
            trace,
        }
    }
}

pub fn deletion_curve<S: ImageScorer + ?Sized>(
    scorer: &S,
    image: &ImageTensor,
    map: &PixelMap,
    truth: &str,
    schedule: &StepSchedule,
) -> Result<CurvePair> {
    let truth_index = scorer
        .index_of(truth)
        .ok_or_else(|| CciError::UnknownLabel(truth.to_string()))?;
    let trace = run_steps(CurveMode::Deletion, scorer, image, map, truth_index, schedule, Blank::Mean)?;
    Ok(CurvePair::from_trace(trace))
}

pub fn insertion_curve<S: ImageScorer + ?Sized>(
    scorer: &S,
    image: &ImageTensor,
    map: &PixelMap,
    truth: &str,
    schedule: &StepSchedule,
    blank: Blank,
) -> Result<CurvePair> {
    let truth_index = scorer
        .index_of(truth)
        .ok_or_else(|| CciError::UnknownLabel(truth.to_string()))?;
    let trace = run_steps(CurveMode::Insertion, scorer, image, map, truth_index, schedule, blank)?;
    Ok(CurvePair::from_trace(trace))
}

/// Text-retrieval deletion curve: a hit means the truth caption is among
/// the `k` captions most similar to the perturbed image.
pub fn retrieval_curve<S: ImageScorer + ?Sized>(
    scorer: &S,
    image: &ImageTensor,
    map: &PixelMap,
    truth_caption: usize,
    schedule: &StepSchedule,
    k: usize,
) -> Result<FaithfulnessCurve> {
    let trace = run_steps(CurveMode::Deletion, scorer, image, map, truth_caption, schedule, Blank::Mean)?;
    Ok(trace.curve(k))
}

/// One `path,label` manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
}

impl ManifestEntry {
    /// File stem, used as the image id for masks and external maps.
    pub fn id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Reads a headerless or `path,label`-headed CSV manifest. Relative paths
/// resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let file = record.get(0).unwrap_or_default();
        let label = record.get(1).unwrap_or_default();
        if i == 0 && file == "path" && label == "label" {
            continue;
        }
        if file.is_empty() {
            continue;
        }
        let p = Path::new(file);
        entries.push(ManifestEntry {
            path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
            label: label.to_string(),
        });
    }
    Ok(entries)
}

/// Supplies the importance map used to rank an image's pixels.
pub trait MapProvider: Sync {
    fn pixel_map(&self, entry: &ManifestEntry, image: &ImageTensor) -> Result<PixelMap>;
}

/// Curves for one image and every requested mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCurves {
    pub id: String,
    pub curves: Vec<CurvePair>,
}

/// Per-step accuracy averaged over images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCurve {
    pub mode: CurveMode,
    pub frac_modified: Vec<f64>,
    pub acc_top1: Vec<f64>,
    pub acc_top5: Vec<f64>,
    pub auc_top1: f64,
    pub auc_top5: f64,
}

impl AggregateCurve {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "frac_modified", "acc_top1", "acc_top5"])?;
        for step in 0..self.acc_top1.len() {
            w.write_record([
                step.to_string(),
                self.frac_modified[step].to_string(),
                self.acc_top1[step].to_string(),
                self.acc_top5[step].to_string(),
            ])?;
        }
        w.into_inner()
            .map_err(|e| CciError::InvalidArgument(format!("csv flush failed: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub auc_top1: f64,
    pub auc_top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCurves {
    pub aggregates: Vec<AggregateCurve>,
    pub per_image: Vec<ImageCurves>,
    pub skipped: Vec<SkippedEntry>,
}

/// Summary written as JSON next to the curve CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub images: usize,
    pub skipped: usize,
    pub steps: usize,
    pub fraction_per_step: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deletion: Option<ModeSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub insertion: Option<ModeSummary>,
}

impl DatasetCurves {
    pub fn aggregate(&self, mode: CurveMode) -> Option<&AggregateCurve> {
        self.aggregates.iter().find(|a| a.mode == mode)
    }

    pub fn summary(&self, schedule: &StepSchedule) -> DatasetSummary {
        let pick = |mode| {
            self.aggregate(mode).map(|a| ModeSummary {
                auc_top1: a.auc_top1,
                auc_top5: a.auc_top5,
            })
        };
        DatasetSummary {
            images: self.per_image.len(),
            skipped: self.skipped.len(),
            steps: schedule.steps,
            fraction_per_step: schedule.fraction_per_step,
            deletion: pick(CurveMode::Deletion),
            insertion: pick(CurveMode::Insertion),
        }
    }
}

/// Runs the requested modes over every manifest entry. Entries that fail to
/// load, or whose label the scorer does not know, are skipped and reported.
/// Images run in parallel; results are reduced in manifest order.
#[allow(clippy::too_many_arguments)]
pub fn dataset_curves<S, M, L>(
    entries: &[ManifestEntry],
    load: L,
    maps: &M,
    scorer: &S,
    modes: &[CurveMode],
    schedule: &StepSchedule,
    blank: Blank,
) -> Result<DatasetCurves>
where
    S: ImageScorer + ?Sized,
    M: MapProvider + ?Sized,
    L: Fn(&ManifestEntry) -> Result<ImageTensor> + Sync,
{
    schedule.validate()?;
    enum Outcome {
        Done(ImageCurves),
        Skipped(SkippedEntry),
    }
    let outcomes: Vec<Result<Outcome>> = entries
        .par_iter()
        .map(|entry| {
            let skip = |reason: String| {
                Ok(Outcome::Skipped(SkippedEntry {
                    path: entry.path.clone(),
                    reason,
                }))
            };
            let image = match load(entry) {
                Ok(img) => img,
                Err(e) => return skip(e.to_string()),
            };
            let Some(truth) = scorer.index_of(&entry.label) else {
                return skip(format!("unknown label `{}`", entry.label));
            };
            let map = maps.pixel_map(entry, &image)?;
            let curves = modes
                .iter()
                .map(|mode| {
                    run_steps(*mode, scorer, &image, &map, truth, schedule, blank).map(CurvePair::from_trace)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Outcome::Done(ImageCurves { id: entry.id(), curves }))
        })
        .collect();

    let mut per_image = Vec::new();
    let mut skipped = Vec::new();
    for outcome in outcomes {
        match outcome? {
            Outcome::Done(c) => per_image.push(c),
            Outcome::Skipped(s) => {
                log::warn!("skipping {}: {}", s.path.display(), s.reason);
                skipped.push(s);
            }
        }
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} of {} manifest entries", skipped.len(), entries.len());
    }

    let aggregates = modes
        .iter()
        .enumerate()
        .filter(|_| !per_image.is_empty())
        .map(|(m, mode)| {
            let count = per_image.len() as f64;
            let len = schedule.steps + 1;
            let mut acc1 = vec![0.0; len];
            let mut acc5 = vec![0.0; len];
            let mut frac = vec![0.0; len];
            for img in &per_image {
                let pair = &img.curves[m];
                for s in 0..len {
                    acc1[s] += pair.top1.values[s];
                    acc5[s] += pair.top5.values[s];
                    frac[s] += pair.trace.frac_modified[s];
                }
            }
            for v in acc1.iter_mut().chain(acc5.iter_mut()).chain(frac.iter_mut()) {
                *v /= count;
            }
            AggregateCurve {
                mode: *mode,
                auc_top1: trapezoid_auc(&acc1),
                auc_top5: trapezoid_auc(&acc5),
                frac_modified: frac,
                acc_top1: acc1,
                acc_top5: acc5,
            }
        })
        .collect();

    Ok(DatasetCurves {
        aggregates,
        per_image,
        skipped,
    })
}
