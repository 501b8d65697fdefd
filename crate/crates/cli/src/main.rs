//! `cci`: importance maps, faithfulness curves, error taxonomy and image
//! variants from the command line.

mod commands;
mod error;
mod logging;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{DiagnoseArgs, EvalArgs, EvalMode, ExplainArgs, TransformArgs};
use error::CliError;
use settings::Settings;

#[derive(Parser)]
#[command(name = "cci", version, about = "Cluster-based concept importance for CLIP-style image encoders")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::Level,
    #[command(flatten)]
    settings: Settings,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write an overlay PNG and a report JSON for each image.
    Explain {
        /// Image files or directories of images.
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        /// Text-bank label to explain against; also recorded in the report.
        #[arg(long)]
        label: String,
        /// Text embedding to use instead of the bank (JSON array or raw f32).
        #[arg(long)]
        text_embedding: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deletion/insertion curves and AUCs over a `path,label` manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        mode: EvalMode,
        /// Use precomputed `<id>.f32` maps instead of computing them.
        #[arg(long)]
        maps_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify zero-shot errors as background- or foreground-driven.
    Diagnose {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of `<image-id>.png` foreground masks.
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate geometric variants of every manifest image.
    Transform {
        #[arg(long, required_unless_present = "regenerate")]
        manifest: Option<PathBuf>,
        /// Comma-separated kinds; defaults to the standard 11.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<String>,
        /// reflect, constant:R,G,B or hook:COMMAND
        #[arg(long, default_value = "reflect")]
        fill: String,
        /// Command producing viewpoint variants.
        #[arg(long)]
        viewpoint_hook: Option<String>,
        /// Re-render an existing variants.csv instead.
        #[arg(long)]
        regenerate: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let settings = match &cli.config {
        Some(path) => cli.settings.or(Settings::load_file(path)?),
        None => cli.settings,
    };
    let cfg = settings.resolve()?;
    if let Some(n) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(CliError::internal)?;
    }
    match cli.command {
        Command::Explain {
            images,
            label,
            text_embedding,
            out,
        } => commands::explain(
            &cfg,
            &ExplainArgs {
                images,
                label,
                text_embedding,
                out,
            },
        ),
        Command::Eval {
            manifest,
            mode,
            maps_dir,
            out,
        } => commands::eval(
            &cfg,
            &EvalArgs {
                manifest,
                mode,
                out,
                maps_dir,
            },
        ),
        Command::Diagnose { manifest, masks, out } => {
            commands::diagnose(&cfg, &DiagnoseArgs { manifest, masks, out })
        }
        Command::Transform {
            manifest,
            kinds,
            fill,
            viewpoint_hook,
            regenerate,
            out,
        } => commands::transform(
            &cfg,
            &TransformArgs {
                manifest,
                kinds,
                fill,
                viewpoint_hook,
                regenerate,
                out,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    logging::init(cli.log_level);
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code)
        }
    }
}
