//! Run settings: a JSON config file overlaid by command-line flags.
//!
//! Precedence, highest first: flag, config file, built-in default. Relative
//! paths in the config file resolve against the file's directory.

use std::path::{Path, PathBuf};

use cci_core::cci::{CciConfig, UpsampleMode};
use cci_core::cluster::KMeansConfig;
use cci_core::diagnose::{HttpJudgeConfig, DEFAULT_BINARIZE_MASS};
use cci_core::encoder::{EncoderOptions, FeatureLayer};
use cci_core::faith::{StepSchedule, DEFAULT_FRACTION, DEFAULT_STEPS};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleArg {
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlankArg {
    Mean,
    Black,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeArg {
    Offline,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureArg {
    Final,
    Penultimate,
}

/// Every tunable shared by the subcommands. All fields are optional so the
/// same struct can hold flags and config-file values before merging.
#[derive(Debug, Clone, Default, clap::Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    /// Model weights (named-tensor container with a sidecar `.json`).
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Explicit sidecar config, if not next to the weights.
    #[arg(long, global = true)]
    pub model_config: Option<PathBuf>,
    /// Text embedding bank (JSON or container).
    #[arg(long, global = true)]
    pub text_bank: Option<PathBuf>,
    /// Number of concept clusters.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub step_frac: Option<f64>,
    /// Seed for deletion noise and noise blanks.
    #[arg(long, global = true)]
    pub noise_seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub upsample: Option<UpsampleArg>,
    #[arg(long, global = true, value_enum)]
    pub blank: Option<BlankArg>,
    #[arg(long, global = true)]
    pub binarize_mass: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub judge: Option<JudgeArg>,
    /// Offline verdict table; defaults to the built-in reference pairs.
    #[arg(long, global = true)]
    pub judge_fixture: Option<PathBuf>,
    #[arg(long, global = true)]
    pub judge_endpoint: Option<String>,
    #[arg(long, global = true)]
    pub judge_model: Option<String>,
    /// Requests per second for the HTTP judge.
    #[arg(long, global = true)]
    pub judge_rps: Option<f64>,
    /// Give negative similarity drops zero weight.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub clamp_negative: Option<bool>,
    /// L2-normalize patch features before clustering.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub kmeans_normalize: Option<bool>,
    #[arg(long, global = true, value_enum)]
    pub feature_layer: Option<FeatureArg>,
    /// Apply the final layer norm to clustering features.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub feature_post_norm: Option<bool>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($field:ident),*) => {
        $( if $dst.$field.is_none() { $dst.$field = $src.$field; } )*
    };
}

impl Settings {
    pub fn load_file(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut s: Settings = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        for p in [&mut s.model, &mut s.model_config, &mut s.text_bank, &mut s.judge_fixture]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(s)
    }

    /// Fills every unset field from `lower`.
    pub fn or(mut self, lower: Settings) -> Self {
        let me = &mut self;
        overlay!(
            me, lower, model, model_config, text_bank, k, seed, steps, step_frac, noise_seed, upsample, blank,
            binarize_mass, judge, judge_fixture, judge_endpoint, judge_model, judge_rps, clamp_negative,
            kmeans_normalize, feature_layer, feature_post_norm, workers
        );
        self
    }

    pub fn resolve(self) -> Result<RunConfig, CliError> {
        let k = self.k.unwrap_or(cci_core::cluster::DEFAULT_K);
        if k == 0 {
            return Err(CliError::usage("--k must be at least 1"));
        }
        let schedule = StepSchedule {
            steps: self.steps.unwrap_or(DEFAULT_STEPS),
            fraction_per_step: self.step_frac.unwrap_or(DEFAULT_FRACTION),
            noise_seed: self.noise_seed.unwrap_or(0),
        };
        schedule.validate().map_err(CliError::usage)?;
        let binarize_mass = self.binarize_mass.unwrap_or(DEFAULT_BINARIZE_MASS);
        if !(binarize_mass > 0.0 && binarize_mass <= 1.0) {
            return Err(CliError::usage("--binarize-mass must be in (0, 1]"));
        }
        if self.workers == Some(0) {
            return Err(CliError::usage("--workers must be at least 1"));
        }
        for p in [&self.model, &self.model_config, &self.text_bank, &self.judge_fixture]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(CliError::usage(format!("{} does not exist", p.display())));
            }
        }
        let seed = self.seed.unwrap_or(0);
        let mut http = HttpJudgeConfig::default();
        if let Some(e) = self.judge_endpoint {
            http.endpoint = e;
        }
        if let Some(m) = self.judge_model {
            http.model = m;
        }
        if let Some(r) = self.judge_rps {
            http.requests_per_second = r;
        }
        Ok(RunConfig {
            model: self.model,
            model_config: self.model_config,
            text_bank: self.text_bank,
            cci: CciConfig {
                k,
                seed,
                kmeans: KMeansConfig {
                    normalize: self.kmeans_normalize.unwrap_or(true),
                    ..KMeansConfig::default()
                },
                clamp_negative: self.clamp_negative.unwrap_or(false),
                upsample: match self.upsample.unwrap_or(UpsampleArg::Bilinear) {
                    UpsampleArg::Bilinear => UpsampleMode::Bilinear,
                    UpsampleArg::Nearest => UpsampleMode::Nearest,
                },
            },
            encoder: EncoderOptions {
                feature_layer: match self.feature_layer.unwrap_or(FeatureArg::Final) {
                    FeatureArg::Final => FeatureLayer::Final,
                    FeatureArg::Penultimate => FeatureLayer::Penultimate,
                },
                feature_post_norm: self.feature_post_norm.unwrap_or(true),
            },
            schedule,
            blank: self.blank.unwrap_or(BlankArg::Mean),
            binarize_mass,
            judge: self.judge.unwrap_or(JudgeArg::Offline),
            judge_fixture: self.judge_fixture,
            http,
            seed,
            workers: self.workers,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub model_config: Option<PathBuf>,
    pub text_bank: Option<PathBuf>,
    pub cci: CciConfig,
    pub encoder: EncoderOptions,
    pub schedule: StepSchedule,
    pub blank: BlankArg,
    pub binarize_mass: f64,
    pub judge: JudgeArg,
    pub judge_fixture: Option<PathBuf>,
    pub http: HttpJudgeConfig,
    pub seed: u64,
    pub workers: Option<usize>,
}
