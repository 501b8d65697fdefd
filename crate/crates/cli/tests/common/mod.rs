#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cci_core::model_io::{save_model, Activation, BankEntry, ModelBundle, TextEmbeddingBank, ViTConfig, CLIP_MEAN, CLIP_STD};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LABELS: [&str; 4] = ["siamang", "chimpanzee", "cat", "airplane"];

/// A tiny model, a text bank, images, masks and a manifest on disk.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub model: PathBuf,
    pub bank: PathBuf,
    pub images: PathBuf,
    pub masks: PathBuf,
    pub manifest: PathBuf,
    pub judge: PathBuf,
}

pub fn tiny_config() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        layers: 2,
        heads: 2,
        embed_dim: 16,
        mlp_dim: 32,
        projection_dim: 8,
        preprocess_mean: CLIP_MEAN,
        preprocess_std: CLIP_STD,
        layer_norm_eps: 1e-5,
        activation: Activation::QuickGelu,
    }
}

impl Fixture {
    pub fn new(images: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let model = root.join("model.safetensors");
        save_model(&ModelBundle::synthetic(tiny_config(), 3).unwrap(), &model).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let entries = LABELS
            .iter()
            .map(|l| BankEntry {
                label: l.to_string(),
                vector: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect();
        let bank = root.join("bank.json");
        fs::write(&bank, TextEmbeddingBank::new(8, entries).unwrap().to_json().unwrap()).unwrap();

        let image_dir = root.join("images");
        let masks = root.join("masks");
        fs::create_dir_all(&image_dir).unwrap();
        fs::create_dir_all(&masks).unwrap();
        let mut rows = String::from("path,label\n");
        for i in 0..images {
            let name = format!("img{i:02}");
            RgbImage::from_fn(20, 20, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
                .save(image_dir.join(format!("{name}.png")))
                .unwrap();
            // Foreground is the left half.
            image::GrayImage::from_fn(16, 16, |x, _| image::Luma([if x < 8 { 255 } else { 0 }]))
                .save(masks.join(format!("{name}.png")))
                .unwrap();
            rows.push_str(&format!("images/{name}.png,{}\n", LABELS[i % LABELS.len()]));
        }
        let manifest = root.join("manifest.csv");
        fs::write(&manifest, rows).unwrap();

        let mut pairs = Vec::new();
        for (a, gt) in LABELS.iter().enumerate() {
            for pred in &LABELS[a + 1..] {
                let verdict = if (gt.len() + pred.len()) % 2 == 0 { "similar" } else { "different" };
                pairs.push(serde_json::json!({"gt": gt, "pred": pred, "verdict": verdict}));
            }
        }
        let judge = root.join("judge.json");
        fs::write(&judge, serde_json::json!({ "pairs": pairs }).to_string()).unwrap();

        Self {
            dir,
            model,
            bank,
            images: image_dir,
            masks,
            manifest,
            judge,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs the binary with the model and bank preset.
    pub fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_cci"));
        cmd.args(args)
            .arg("--model")
            .arg(&self.model)
            .arg("--text-bank")
            .arg(&self.bank)
            .args(["--log-level", "warn"])
            .env_remove("CCI_JUDGE_API_KEY");
        cmd.output().unwrap()
    }
}

pub fn ok(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

/// The structured error printed on stderr.
pub fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .rev()
        .find(|l| l.starts_with("{\"error\""))
        .unwrap_or_else(|| panic!("no error line in {stderr}"));
    serde_json::from_str(line).unwrap()
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
