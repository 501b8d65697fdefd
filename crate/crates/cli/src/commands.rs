use std::fs;
use std::path::{Path, PathBuf};

use cci_core::cci::{compute_cci, render_overlay, CciConfig, CciReport, PixelMap};
use cci_core::diagnose::{
    aggregate_taxonomy, classify, FgMask, HttpJudge, Judge, OfflineJudge, API_KEY_ENV,
};
use cci_core::encoder::{MaskedEncoder, VitEncoder};
use cci_core::faith::{
    dataset_curves, read_manifest, zero_shot, Blank, CurveMode, EncoderScorer, ManifestEntry, MapProvider,
};
use cci_core::model_io::{
    load_model, load_model_with_config, load_text_bank, preprocess, ImageTensor, ModelBundle, TextEmbeddingBank,
};
use cci_core::transforms::{self, Fill, SubsetOptions, STANDARD_KINDS};
use cci_core::{resample, CciError};
use clap::ValueEnum;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::CliError;
use crate::settings::{BlankArg, JudgeArg, RunConfig};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::internal(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::usage(format!("cannot create {}: {e}", path.display())))
}

fn pretty_json<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(CliError::internal)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn json_lines<T: Serialize>(items: &[T]) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(CliError::internal)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn load_bundle(cfg: &RunConfig) -> Result<ModelBundle, CliError> {
    let model = cfg.model.as_deref().ok_or_else(|| CliError::usage("--model is required"))?;
    let bundle = match &cfg.model_config {
        Some(c) => load_model_with_config(model, c),
        None => load_model(model),
    }
    .map_err(CliError::usage)?;
    log::info!("loaded model {} (sha256 {})", model.display(), bundle.provenance());
    Ok(bundle)
}

fn load_bank(cfg: &RunConfig, dim: usize) -> Result<TextEmbeddingBank, CliError> {
    let path = cfg
        .text_bank
        .as_deref()
        .ok_or_else(|| CliError::usage("--text-bank is required"))?;
    load_text_bank(path, Some(dim), false).map_err(CciError::into_usage)
}

trait IntoUsage {
    fn into_usage(self) -> CliError;
}

impl IntoUsage for CciError {
    fn into_usage(self) -> CliError {
        match self {
            CciError::UnknownLabel(l) => CliError::unknown_label(&l),
            other => CliError::usage(other),
        }
    }
}

fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, CliError> {
    let entries = read_manifest(path).map_err(CliError::usage)?;
    if entries.is_empty() {
        return Err(CliError::usage(format!("manifest {} has no entries", path.display())));
    }
    Ok(entries)
}

fn load_tensor(path: &Path, bundle: &ModelBundle) -> cci_core::Result<ImageTensor> {
    preprocess(&image::open(path)?, bundle.config())
}

fn blank_for(cfg: &RunConfig, bundle: &ModelBundle) -> Blank {
    match cfg.blank {
        BlankArg::Mean => Blank::Mean,
        BlankArg::Black => Blank::black(bundle.config()),
        BlankArg::Noise => Blank::Noise,
    }
}

/// Expands directories to their image files, sorted by name.
fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| CliError::usage(format!("cannot list {}: {e}", input.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else if input.is_file() {
            out.push(input.clone());
        } else {
            return Err(CliError::usage(format!("{} does not exist", input.display())));
        }
    }
    if out.is_empty() {
        return Err(CliError::usage("no input images"));
    }
    Ok(out)
}

/// Reads a text embedding from a JSON array or raw little-endian `f32`s.
fn read_embedding(path: &Path, dim: usize) -> Result<Vec<f32>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let v: Vec<f32> = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_slice(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
    } else {
        if bytes.len() % 4 != 0 {
            return Err(CliError::usage(format!("{} is not a whole number of f32 values", path.display())));
        }
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };
    if v.len() != dim {
        return Err(CliError::usage(format!(
            "text embedding has {} values, model projects to {dim}",
            v.len()
        )));
    }
    Ok(v)
}

pub struct ExplainArgs {
    pub images: Vec<PathBuf>,
    pub label: String,
    pub text_embedding: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn explain(cfg: &RunConfig, args: &ExplainArgs) -> Result<Value, CliError> {
    let bundle = load_bundle(cfg)?;
    let dim = bundle.config().projection_dim;
    let text = match &args.text_embedding {
        Some(p) => read_embedding(p, dim)?,
        None => {
            let bank = load_bank(cfg, dim)?;
            bank.vector(&args.label)
                .ok_or_else(|| CliError::unknown_label(&args.label))?
                .to_vec()
        }
    };
    let images = collect_images(&args.images)?;
    let encoder = VitEncoder::with_options(&bundle, cfg.encoder).map_err(CliError::usage)?;
    create_dir(&args.out)?;
    let size = bundle.config().image_size as u32;
    let mut written = Vec::new();
    for path in &images {
        let raw = image::open(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let tensor = preprocess(&raw, bundle.config()).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let map = compute_cci(&encoder, &tensor, &text, &cfg.cci)?;
        if map.score.degenerate {
            log::warn!("{}: similarity drops sum to ~0, weights are uniform", path.display());
        }
        let report = CciReport::new(args.label.clone(), &map);
        let raster = resample::resize_rgb_bilinear(&raw.to_rgb8(), size, size);
        let overlay = render_overlay(&raster, &map.pixel_map)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let png_path = args.out.join(format!("{stem}.overlay.png"));
        let json_path = args.out.join(format!("{stem}.report.json"));
        write_file(&png_path, &overlay.png)?;
        write_file(&json_path, &pretty_json(&report)?)?;
        log::info!("explained {}", path.display());
        written.push(png_path);
        written.push(json_path);
    }
    Ok(json!({"command": "explain", "images": images.len(), "outputs": written}))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Deletion,
    Insertion,
    Both,
}

impl EvalMode {
    fn modes(self) -> Vec<CurveMode> {
        match self {
            EvalMode::Deletion => vec![CurveMode::Deletion],
            EvalMode::Insertion => vec![CurveMode::Insertion],
            EvalMode::Both => vec![CurveMode::Deletion, CurveMode::Insertion],
        }
    }
}

pub struct EvalArgs {
    pub manifest: PathBuf,
    pub mode: EvalMode,
    pub out: PathBuf,
    pub maps_dir: Option<PathBuf>,
}

/// CCI maps for each image's ground-truth label.
struct CciMaps<'a, E> {
    encoder: &'a E,
    bank: &'a TextEmbeddingBank,
    config: &'a CciConfig,
}

impl<E: MaskedEncoder> MapProvider for CciMaps<'_, E> {
    fn pixel_map(&self, entry: &ManifestEntry, image: &ImageTensor) -> cci_core::Result<PixelMap> {
        let text = self
            .bank
            .vector(&entry.label)
            .ok_or_else(|| CciError::UnknownLabel(entry.label.clone()))?;
        Ok(compute_cci(self.encoder, image, text, self.config)?.pixel_map)
    }
}

/// Precomputed maps stored as `<dir>/<image-id>.f32`, raw little-endian,
/// row-major at model resolution.
pub struct RawMaps {
    pub dir: PathBuf,
    pub size: usize,
}

impl MapProvider for RawMaps {
    fn pixel_map(&self, entry: &ManifestEntry, _image: &ImageTensor) -> cci_core::Result<PixelMap> {
        let path = self.dir.join(format!("{}.f32", entry.id()));
        let bytes = fs::read(&path).map_err(|e| CciError::InvalidArgument(format!("{}: {e}", path.display())))?;
        if bytes.len() != self.size * self.size * 4 {
            return Err(CciError::dim(self.size * self.size * 4, bytes.len(), "external map bytes"));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        PixelMap::new(self.size, values)
    }
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<Value, CliError> {
    let entries = load_manifest(&args.manifest)?;
    let bundle = load_bundle(cfg)?;
    let bank = load_bank(cfg, bundle.config().projection_dim)?;
    let encoder = VitEncoder::with_options(&bundle, cfg.encoder).map_err(CliError::usage)?;
    let scorer = EncoderScorer::new(&encoder, &bank);
    let modes = args.mode.modes();
    let load = |e: &ManifestEntry| load_tensor(&e.path, &bundle);
    let blank = blank_for(cfg, &bundle);
    let curves = match &args.maps_dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(CliError::usage(format!("{} is not a directory", dir.display())));
            }
            let maps = RawMaps {
                dir: dir.clone(),
                size: bundle.config().image_size,
            };
            dataset_curves(&entries, load, &maps, &scorer, &modes, &cfg.schedule, blank)?
        }
        None => {
            let maps = CciMaps {
                encoder: &encoder,
                bank: &bank,
                config: &cfg.cci,
            };
            dataset_curves(&entries, load, &maps, &scorer, &modes, &cfg.schedule, blank)?
        }
    };
    create_dir(&args.out)?;
    let mut written = Vec::new();
    for agg in &curves.aggregates {
        let path = args.out.join(format!("{}.csv", agg.mode.as_str()));
        write_file(&path, &agg.to_csv()?)?;
        written.push(path);
    }
    let per_image: Vec<Value> = curves
        .per_image
        .iter()
        .map(|img| {
            let modes: serde_json::Map<String, Value> = img
                .curves
                .iter()
                .map(|c| {
                    (
                        c.trace.mode.as_str().to_string(),
                        json!({"auc_top1": c.top1.auc, "auc_top5": c.top5.auc}),
                    )
                })
                .collect();
            json!({"id": img.id, "curves": modes})
        })
        .collect();
    let per_image_path = args.out.join("per_image.jsonl");
    write_file(&per_image_path, &json_lines(&per_image)?)?;
    written.push(per_image_path);
    let summary = curves.summary(&cfg.schedule);
    let summary_path = args.out.join("summary.json");
    write_file(&summary_path, &pretty_json(&summary)?)?;
    written.push(summary_path);
    Ok(json!({"command": "eval", "summary": summary, "outputs": written}))
}

pub struct DiagnoseArgs {
    pub manifest: PathBuf,
    pub masks: PathBuf,
    pub out: PathBuf,
}

fn build_judge(cfg: &RunConfig) -> Result<Box<dyn Judge>, CliError> {
    Ok(match cfg.judge {
        JudgeArg::Http => Box::new(
            HttpJudge::from_env(cfg.http.clone())
                .map_err(|_| CliError::usage(format!("--judge http needs {API_KEY_ENV} in the environment")))?,
        ),
        JudgeArg::Offline => Box::new(match &cfg.judge_fixture {
            Some(p) => OfflineJudge::load(p).map_err(CliError::usage)?,
            None => OfflineJudge::reference_examples(),
        }),
    })
}

#[derive(Serialize)]
struct Skipped {
    image_id: String,
    reason: String,
}

pub fn diagnose(cfg: &RunConfig, args: &DiagnoseArgs) -> Result<Value, CliError> {
    let judge = build_judge(cfg)?;
    let entries = load_manifest(&args.manifest)?;
    if !args.masks.is_dir() {
        return Err(CliError::usage(format!("{} is not a directory", args.masks.display())));
    }
    let bundle = load_bundle(cfg)?;
    let bank = load_bank(cfg, bundle.config().projection_dim)?;
    let encoder = VitEncoder::with_options(&bundle, cfg.encoder).map_err(CliError::usage)?;
    let scorer = EncoderScorer::new(&encoder, &bank);
    let size = bundle.config().image_size;

    let outcomes: Vec<Result<Result<_, Skipped>, CliError>> = entries
        .par_iter()
        .map(|entry| {
            let id = entry.id();
            let skip = |reason: String| {
                log::warn!("skipping {id}: {reason}");
                Ok(Err(Skipped {
                    image_id: id.clone(),
                    reason,
                }))
            };
            if bank.index_of(&entry.label).is_none() {
                return skip(format!("unknown label `{}`", entry.label));
            }
            let mask_path = args.masks.join(format!("{id}.png"));
            if !mask_path.is_file() {
                return skip(format!("missing mask {}", mask_path.display()));
            }
            let fg = match FgMask::load(&mask_path, size, &entry.label) {
                Ok(m) => m,
                Err(e) => return skip(e.to_string()),
            };
            let image = match load_tensor(&entry.path, &bundle) {
                Ok(t) => t,
                Err(e) => return skip(e.to_string()),
            };
            let result = zero_shot(&scorer, &image, &entry.label)?;
            let pred = result.predicted().to_string();
            let text = bank.vector(&pred).expect("prediction comes from the bank");
            let map = compute_cci(&encoder, &image, text, &cfg.cci)?;
            let record = classify(&id, &map, &fg, &entry.label, &pred, judge.as_ref(), cfg.binarize_mass)
                .map_err(|e| match (cfg.judge, e) {
                    (JudgeArg::Offline, CciError::Judge(m)) => CliError::usage(m),
                    (_, e) => CliError::from(e),
                })?;
            Ok(Ok(record))
        })
        .collect();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for outcome in outcomes {
        match outcome? {
            Ok(r) => records.push(r),
            Err(s) => skipped.push(s),
        }
    }
    if records.is_empty() {
        return Err(CliError::usage("no manifest entry could be diagnosed"));
    }
    let report = aggregate_taxonomy(&records)?;
    create_dir(&args.out)?;
    let records_path = args.out.join("records.jsonl");
    let json_path = args.out.join("taxonomy.json");
    let csv_path = args.out.join("taxonomy.csv");
    write_file(&records_path, &json_lines(&records)?)?;
    write_file(&json_path, &pretty_json(&json!({"taxonomy": report, "skipped": skipped}))?)?;
    write_file(&csv_path, &report.to_csv()?)?;
    Ok(json!({
        "command": "diagnose",
        "records": records.len(),
        "skipped": skipped.len(),
        "outputs": [records_path, json_path, csv_path],
    }))
}

pub struct TransformArgs {
    pub manifest: Option<PathBuf>,
    pub kinds: Vec<String>,
    pub fill: String,
    pub viewpoint_hook: Option<String>,
    pub regenerate: Option<PathBuf>,
    pub out: PathBuf,
}

/// `reflect`, `constant:R,G,B` or `hook:COMMAND`.
pub fn parse_fill(s: &str) -> Result<Fill, CliError> {
    if s == "reflect" {
        return Ok(Fill::Reflect);
    }
    if let Some(cmd) = s.strip_prefix("hook:") {
        if cmd.trim().is_empty() {
            return Err(CliError::usage("hook fill needs a command"));
        }
        return Ok(Fill::Hook {
            command: cmd.to_string(),
        });
    }
    if let Some(rgb) = s.strip_prefix("constant:") {
        let parts: Vec<u8> = rgb
            .split(',')
            .map(|p| p.trim().parse::<u8>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::usage(format!("bad colour `{rgb}`")))?;
        if let [r, g, b] = parts[..] {
            return Ok(Fill::Constant { rgb: [r, g, b] });
        }
    }
    Err(CliError::usage(format!("unknown fill `{s}` (reflect, constant:R,G,B or hook:CMD)")))
}

pub fn transform(cfg: &RunConfig, args: &TransformArgs) -> Result<Value, CliError> {
    if let Some(variants) = &args.regenerate {
        let written = transforms::regenerate(variants, &args.out).map_err(|e| match e {
            CciError::Io { .. } | CciError::Csv(_) | CciError::Json(_) => CliError::usage(e),
            other => CliError::from(other),
        })?;
        return Ok(json!({"command": "transform", "regenerated": written.len()}));
    }
    let manifest = args
        .manifest
        .as_deref()
        .ok_or_else(|| CliError::usage("--manifest or --regenerate is required"))?;
    let entries = load_manifest(manifest)?;
    let kinds = if args.kinds.is_empty() {
        STANDARD_KINDS.iter().map(|k| k.to_string()).collect()
    } else {
        args.kinds.clone()
    };
    let opts = SubsetOptions {
        kinds,
        seed: cfg.seed,
        fill: parse_fill(&args.fill)?,
        viewpoint_hook: args.viewpoint_hook.clone(),
    };
    let report = transforms::make_subset(&entries, &args.out, &opts).map_err(|e| match e {
        CciError::InvalidArgument(_) => CliError::usage(e),
        other => CliError::from(other),
    })?;
    Ok(json!({
        "command": "transform",
        "rows": report.rows.len(),
        "skipped": report.skipped.len(),
        "manifest": report.manifest_path,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_parsing() {
        assert_eq!(parse_fill("reflect").unwrap(), Fill::Reflect);
        assert_eq!(parse_fill("constant:1,2,3").unwrap(), Fill::Constant { rgb: [1, 2, 3] });
        assert_eq!(
            parse_fill("hook:inpaint --steps 30").unwrap(),
            Fill::Hook {
                command: "inpaint --steps 30".into()
            }
        );
        for bad in ["constant:1,2", "constant:1,2,300", "hook:", "mirror"] {
            assert_eq!(parse_fill(bad).unwrap_err().code, 2, "{bad}");
        }
    }

    #[test]
    fn embedding_file_formats() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("t.f32");
        fs::write(&raw, [1.0f32, -2.0].iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>()).unwrap();
        assert_eq!(read_embedding(&raw, 2).unwrap(), vec![1.0, -2.0]);
        let js = dir.path().join("t.json");
        fs::write(&js, "[0.5, 0.25, 1]").unwrap();
        assert_eq!(read_embedding(&js, 3).unwrap(), vec![0.5, 0.25, 1.0]);
        assert_eq!(read_embedding(&js, 4).unwrap_err().code, 2);
    }
}
