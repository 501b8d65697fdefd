//! Geometric image variants: flips, rotation, centred crop, translation and
//! canvas scaling, plus hook-only viewpoint changes.
//!
//! Every variant is described by a [`TransformSpec`] whose sampled
//! parameters are recorded in a CSV manifest, so a variant set can be
//! regenerated byte for byte from the manifest alone.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cci::encode_png;
use crate::error::{CciError, Result};
use crate::faith::ManifestEntry;
use crate::resample;

pub const MAX_ROTATION_DEGREES: f64 = 45.0;
pub const CROP_AREA_RANGE: (f64, f64) = (0.6, 0.9);
pub const MAX_TRANSLATION: f64 = 0.2;
pub const MAX_SCALE: f64 = 8.0;

/// The standard 11-way variant set: five geometric edits, four canvas scales
/// and two viewpoints that need an external generator.
pub const STANDARD_KINDS: [&str; 11] = [
    "hflip",
    "vflip",
    "rotate",
    "crop",
    "translate",
    "scale2",
    "scale4",
    "scale6",
    "scale8",
    "viewpoint1",
    "viewpoint2",
];

pub const MANIFEST_FILE: &str = "variants.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Transform {
    Hflip,
    Vflip,
    /// Counter-clockwise as displayed, about the image centre.
    Rotate { degrees: f64 },
    /// Fraction of the original area kept by the centred crop.
    Crop { area: f64 },
    /// Shift as a fraction of width and height; positive moves right/down.
    Translate { dx: f64, dy: f64 },
    /// Canvas side relative to the original.
    Scale { factor: f64 },
    Viewpoint { view: u32 },
}

impl Transform {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CciError::InvalidArgument(msg));
        match *self {
            Transform::Rotate { degrees } if !(degrees.abs() <= MAX_ROTATION_DEGREES) => {
                bad(format!("rotation {degrees} outside [-45, 45]"))
            }
            Transform::Crop { area } if !(area >= CROP_AREA_RANGE.0 && area <= CROP_AREA_RANGE.1) => {
                bad(format!("crop area {area} outside [0.6, 0.9]"))
            }
            Transform::Translate { dx, dy } if !(dx.abs() <= MAX_TRANSLATION && dy.abs() <= MAX_TRANSLATION) => {
                bad(format!("translation ({dx}, {dy}) exceeds 20% of the image"))
            }
            Transform::Scale { factor } if !(factor > 1.0 && factor <= MAX_SCALE) => {
                bad(format!("scale factor {factor} outside (1, 8]"))
            }
            _ => Ok(()),
        }
    }

    /// Builds the transform for a kind token, drawing unspecified parameters
    /// from `rng`. Tokens: `hflip`, `vflip`, `rotate`, `crop`, `translate`,
    /// `scale` (sampled factor), `scale<f>` (fixed factor), `viewpoint<n>`.
    pub fn sample(token: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        let t = match token {
            "hflip" => Transform::Hflip,
            "vflip" => Transform::Vflip,
            "rotate" => Transform::Rotate {
                degrees: rng.gen_range(-MAX_ROTATION_DEGREES..=MAX_ROTATION_DEGREES),
            },
            "crop" => Transform::Crop {
                area: rng.gen_range(CROP_AREA_RANGE.0..=CROP_AREA_RANGE.1),
            },
            "translate" => Transform::Translate {
                dx: rng.gen_range(-MAX_TRANSLATION..=MAX_TRANSLATION),
                dy: rng.gen_range(-MAX_TRANSLATION..=MAX_TRANSLATION),
            },
            "scale" => Transform::Scale {
                factor: MAX_SCALE - (MAX_SCALE - 1.0) * rng.gen::<f64>(),
            },
            _ => {
                let parsed = if let Some(f) = token.strip_prefix("scale") {
                    f.parse().ok().map(|factor| Transform::Scale { factor })
                } else if let Some(v) = token.strip_prefix("viewpoint") {
                    v.parse().ok().map(|view| Transform::Viewpoint { view })
                } else {
                    None
                };
                parsed.ok_or_else(|| CciError::InvalidArgument(format!("unknown transform kind `{token}`")))?
            }
        };
        t.validate()?;
        Ok(t)
    }
}

/// How pixels not covered by the source image are filled.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Fill {
    Constant { rgb: [u8; 3] },
    /// Mirror padding without repeating the edge pixel.
    #[default]
    Reflect,
    /// Runs `<command> <in.png> <mask.png> <out.png>`; the mask is white where
    /// pixels must be synthesized. Extra arguments may follow the program
    /// name, separated by whitespace.
    Hook { command: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    #[serde(flatten)]
    pub transform: Transform,
    pub seed: u64,
    pub fill: Fill,
}

#[derive(Clone, Copy)]
enum Border {
    Constant(Rgb<u8>),
    Reflect,
}

fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

fn fetch(src: &RgbImage, x: i64, y: i64, border: Border) -> Rgb<u8> {
    let (w, h) = (src.width() as i64, src.height() as i64);
    if (0..w).contains(&x) && (0..h).contains(&y) {
        return *src.get_pixel(x as u32, y as u32);
    }
    match border {
        Border::Constant(c) => c,
        Border::Reflect => *src.get_pixel(
            reflect_index(x, w as usize) as u32,
            reflect_index(y, h as usize) as u32,
        ),
    }
}

/// Output raster plus the pixels that did not come from the source.
struct Placed {
    image: RgbImage,
    exposed: Vec<bool>,
}

/// Integer placement: output pixel (x, y) reads source (x - ox, y - oy).
fn place(src: &RgbImage, out_w: u32, out_h: u32, ox: i64, oy: i64, border: Border) -> Placed {
    let (w, h) = (src.width() as i64, src.height() as i64);
    let mut exposed = Vec::with_capacity(out_w as usize * out_h as usize);
    let image = RgbImage::from_fn(out_w, out_h, |x, y| {
        let (sx, sy) = (x as i64 - ox, y as i64 - oy);
        exposed.push(!((0..w).contains(&sx) && (0..h).contains(&sy)));
        fetch(src, sx, sy, border)
    });
    Placed { image, exposed }
}

fn rotate(src: &RgbImage, degrees: f64, border: Border) -> Placed {
    let (w, h) = (src.width(), src.height());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let mut exposed = Vec::with_capacity(w as usize * h as usize);
    let image = RgbImage::from_fn(w, h, |x, y| {
        let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        // Inverse of a counter-clockwise turn in y-down coordinates.
        let sx = cos * px - sin * py + cx - 0.5;
        let sy = sin * px + cos * py + cy - 0.5;
        exposed.push(!(sx >= -0.5 && sx <= w as f64 - 0.5 && sy >= -0.5 && sy <= h as f64 - 0.5));
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let taps = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1, y0, fx * (1.0 - fy)),
            (x0, y0 + 1, (1.0 - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ];
        let mut acc = [0f64; 3];
        for (tx, ty, wt) in taps {
            let p = fetch(src, tx, ty, border);
            for (a, v) in acc.iter_mut().zip(p.0) {
                *a += wt * f64::from(v);
            }
        }
        Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
    });
    Placed { image, exposed }
}

/// Side length and offset of the centred crop keeping `area` of the image.
pub fn crop_window(len: u32, area: f64) -> (u32, u32) {
    let side = (len as f64 * area.sqrt()).round() as u32;
    (side, (len - side) / 2)
}

fn crop(src: &RgbImage, area: f64) -> Result<RgbImage> {
    let (cw, x0) = crop_window(src.width(), area);
    let (ch, y0) = crop_window(src.height(), area);
    if cw == 0 || ch == 0 {
        return Err(CciError::InvalidArgument("crop has zero area".into()));
    }
    let region = image::imageops::crop_imm(src, x0, y0, cw, ch).to_image();
    Ok(resample::resize_rgb_bilinear(&region, src.width(), src.height()))
}

fn run_hook(command: &str, image: &RgbImage, mask: &[bool]) -> Result<RgbImage> {
    let mut parts = command.split_whitespace();
    let program = parts
        .next()
        .ok_or_else(|| CciError::Hook("empty hook command".into()))?;
    let dir = tempfile::tempdir().map_err(|e| CciError::Hook(format!("temp dir: {e}")))?;
    let (inp, maskp, outp) = (dir.path().join("in.png"), dir.path().join("mask.png"), dir.path().join("out.png"));
    image.save(&inp)?;
    let gray = GrayImage::from_fn(image.width(), image.height(), |x, y| {
        Luma([if mask[(y * image.width() + x) as usize] { 255 } else { 0 }])
    });
    gray.save(&maskp)?;
    let status = Command::new(program)
        .args(parts)
        .arg(&inp)
        .arg(&maskp)
        .arg(&outp)
        .status()
        .map_err(|e| CciError::Hook(format!("cannot run `{program}`: {e}")))?;
    if !status.success() {
        return Err(CciError::Hook(format!("`{command}` exited with {status}")));
    }
    let out = image::open(&outp)
        .map_err(|e| CciError::Hook(format!("hook output unreadable: {e}")))?
        .to_rgb8();
    if out.dimensions() != image.dimensions() {
        return Err(CciError::Hook(format!(
            "hook output is {:?}, expected {:?}",
            out.dimensions(),
            image.dimensions()
        )));
    }
    Ok(out)
}

/// Applies one transform. Flips and integer placements are exact; rotation
/// uses bilinear sampling and returns the input unchanged for 0 degrees.
/// Scaling returns the enlarged canvas; resizing to model resolution happens
/// at preprocessing time.
pub fn apply(src: &RgbImage, spec: &TransformSpec) -> Result<RgbImage> {
    spec.transform.validate()?;
    let (w, h) = src.dimensions();
    if w == 0 || h == 0 {
        return Err(CciError::InvalidArgument("zero-area image".into()));
    }
    let border = match &spec.fill {
        Fill::Constant { rgb } => Border::Constant(Rgb(*rgb)),
        Fill::Reflect => Border::Reflect,
        Fill::Hook { .. } => Border::Constant(Rgb([0, 0, 0])),
    };
    let placed = match spec.transform {
        Transform::Hflip => return Ok(image::imageops::flip_horizontal(src)),
        Transform::Vflip => return Ok(image::imageops::flip_vertical(src)),
        Transform::Crop { area } => return crop(src, area),
        Transform::Rotate { degrees: 0.0 } => return Ok(src.clone()),
        Transform::Rotate { degrees } => rotate(src, degrees, border),
        Transform::Translate { dx, dy } => {
            let (ox, oy) = ((dx * w as f64).round() as i64, (dy * h as f64).round() as i64);
            place(src, w, h, ox, oy, border)
        }
        Transform::Scale { factor } => {
            let (cw, ch) = ((w as f64 * factor).round() as u32, (h as f64 * factor).round() as u32);
            place(src, cw, ch, i64::from((cw - w) / 2), i64::from((ch - h) / 2), border)
        }
        Transform::Viewpoint { view } => {
            let Fill::Hook { command } = &spec.fill else {
                return Err(CciError::Hook(format!("viewpoint {view} needs an external hook")));
            };
            return run_hook(command, src, &vec![true; (w * h) as usize]);
        }
    };
    match &spec.fill {
        Fill::Hook { command } if placed.exposed.iter().any(|e| *e) => run_hook(command, &placed.image, &placed.exposed),
        _ => Ok(placed.image),
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Seed for one (image, kind) item, independent of the other kinds requested.
pub fn item_seed(seed: u64, image_index: usize, kind: &str) -> u64 {
    splitmix64(seed ^ splitmix64(image_index as u64 + 1) ^ fnv1a(kind))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub src: String,
    pub kind: String,
    pub params_json: String,
    pub out_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantStatus {
    Generated,
    HookPending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantParams {
    #[serde(flatten)]
    pub spec: TransformSpec,
    pub status: VariantStatus,
}

impl VariantRow {
    pub fn params(&self) -> Result<VariantParams> {
        Ok(serde_json::from_str(&self.params_json)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetOptions {
    pub kinds: Vec<String>,
    pub seed: u64,
    pub fill: Fill,
    /// Generator for viewpoint variants; without one they are recorded as
    /// hook-pending and no file is written.
    pub viewpoint_hook: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetReport {
    pub rows: Vec<VariantRow>,
    pub skipped: Vec<(String, String)>,
    pub manifest_path: PathBuf,
}

fn variant_file(index: usize, entry: &ManifestEntry, kind: &str) -> String {
    format!("{index:05}_{}_{kind}.png", entry.id())
}

type ImageOutput = std::result::Result<Vec<(VariantRow, Option<Vec<u8>>)>, String>;

fn generate_for_image(index: usize, entry: &ManifestEntry, opts: &SubsetOptions) -> Result<ImageOutput> {
    let src = match image::open(&entry.path) {
        Ok(img) => img.to_rgb8(),
        Err(e) => return Ok(Err(e.to_string())),
    };
    let mut out = Vec::with_capacity(opts.kinds.len());
    for kind in &opts.kinds {
        let seed = item_seed(opts.seed, index, kind);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let transform = Transform::sample(kind, &mut rng)?;
        let (fill, pending) = match (transform, &opts.viewpoint_hook) {
            (Transform::Viewpoint { .. }, Some(cmd)) => (Fill::Hook { command: cmd.clone() }, false),
            (Transform::Viewpoint { .. }, None) => (opts.fill.clone(), true),
            _ => (opts.fill.clone(), false),
        };
        let spec = TransformSpec { transform, seed, fill };
        let png = if pending { None } else { Some(encode_png(&apply(&src, &spec)?)?) };
        let params = VariantParams {
            spec,
            status: if pending { VariantStatus::HookPending } else { VariantStatus::Generated },
        };
        out.push((
            VariantRow {
                src: entry.path.display().to_string(),
                kind: kind.clone(),
                params_json: serde_json::to_string(&params)?,
                out_path: variant_file(index, entry, kind),
            },
            png,
        ));
    }
    Ok(Ok(out))
}

pub fn write_variant_manifest(path: &Path, rows: &[VariantRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CciError::io(path, e))
}

pub fn read_variant_manifest(path: &Path) -> Result<Vec<VariantRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Generates every requested variant of every manifest image into `out_dir`
/// and writes `variants.csv` there. Images that cannot be read are logged
/// and skipped.
pub fn make_subset(entries: &[ManifestEntry], out_dir: &Path, opts: &SubsetOptions) -> Result<SubsetReport> {
    for kind in &opts.kinds {
        Transform::sample(kind, &mut ChaCha8Rng::seed_from_u64(0))?;
    }
    fs::create_dir_all(out_dir).map_err(|e| CciError::io(out_dir, e))?;
    let generated: Vec<Result<ImageOutput>> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| generate_for_image(i, e, opts))
        .collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (entry, result) in entries.iter().zip(generated) {
        match result? {
            Err(reason) => {
                log::warn!("skipping {}: {reason}", entry.path.display());
                skipped.push((entry.path.display().to_string(), reason));
            }
            Ok(items) => {
                for (row, png) in items {
                    if let Some(bytes) = png {
                        let path = out_dir.join(&row.out_path);
                        fs::write(&path, bytes).map_err(|e| CciError::io(&path, e))?;
                    }
                    rows.push(row);
                }
            }
        }
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_variant_manifest(&manifest_path, &rows)?;
    Ok(SubsetReport {
        rows,
        skipped,
        manifest_path,
    })
}

type Rendered = (PathBuf, Vec<u8>);

/// Re-renders every generated row of a variant manifest into `out_dir`,
/// using only the recorded parameters. Returns the written paths.
pub fn regenerate(manifest: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_variant_manifest(manifest)?;
    fs::create_dir_all(out_dir).map_err(|e| CciError::io(out_dir, e))?;
    let rendered: Vec<Result<Option<Rendered>>> = rows
        .par_iter()
        .map(|row| {
            let params = row.params()?;
            if params.status == VariantStatus::HookPending {
                return Ok(None);
            }
            let src = image::open(&row.src)?.to_rgb8();
            let png = encode_png(&apply(&src, &params.spec)?)?;
            Ok(Some((out_dir.join(&row.out_path), png)))
        })
        .collect();
    let mut written = Vec::new();
    for item in rendered {
        if let Some((path, bytes)) = item? {
            fs::write(&path, bytes).map_err(|e| CciError::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}
