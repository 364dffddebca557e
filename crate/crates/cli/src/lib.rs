//! Command-line driver: dataset generation, staged training, sampling,
//! evaluation and the projection ablation grid.

mod ablate;
mod infer;
mod pipeline;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use scalar_core::data::{save_dataset, Modality};
use scalar_core::train::Mode;

pub use ablate::{parse_grid, AblationGrid, AblationRow};
pub use pipeline::{base_model, finetune, Paths};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "SCALAR_SEED";

#[derive(Debug, Parser)]
#[command(name = "scalar", version, about = "Controllable next-scale image generation at desk scale")]
pub struct Cli {
    /// Root that every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus with every condition map and a manifest.
    DatasetGen {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokenizer, backbone and control training (or resume of the last stage).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "scalar")]
        mode: Mode,
        /// Control-stage checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample images for one class, optionally under a condition map.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        class: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Condition map (PGM/PPM) fed through the control path.
        #[arg(long)]
        control: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Guidance scale; the run configuration's value when absent.
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Regenerate the white region of a mask and keep the rest of a source image.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        /// Binary PGM; white pixels are regenerated.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        class: usize,
        #[arg(long)]
        control: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Conditional consistency and Fréchet distance on an evaluation set.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        /// Dataset directory; a fresh synthetic set when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated; defaults to the modalities the model was trained on.
        #[arg(long, value_delimiter = ',')]
        modalities: Vec<Modality>,
        /// Ignore the control path (class-only baseline).
        #[arg(long)]
        no_control: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and score every cell of a projection/freeze grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
}

/// Joins `p` onto the work directory unless it is absolute.
pub fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

/// Seed from the environment, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(None),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let wd = cli.workdir.as_path();
    match cli.command {
        Command::DatasetGen { count, seed, out } => {
            let root = resolve(wd, &out);
            let m = save_dataset(&root, count as usize, seed)?;
            println!("wrote {} samples to {}", m.count, root.display());
            Ok(())
        }
        Command::Train { config, mode, resume } => pipeline::cmd_train(wd, &config, mode, resume.as_deref()),
        Command::Generate {
            checkpoint,
            out,
            class,
            count,
            control,
            seed,
            guidance,
        } => infer::cmd_generate(
            wd,
            &checkpoint,
            &out,
            class,
            count,
            control.as_deref(),
            seed,
            guidance,
        ),
        Command::Inpaint {
            checkpoint,
            source,
            mask,
            out,
            class,
            control,
            seed,
        } => infer::cmd_inpaint(wd, &checkpoint, &source, &mask, &out, class, control.as_deref(), seed),
        Command::Evaluate {
            checkpoint,
            out,
            count,
            data,
            modalities,
            no_control,
            seed,
        } => infer::cmd_evaluate(
            wd,
            &checkpoint,
            &out,
            count,
            data.as_deref(),
            &modalities,
            no_control,
            seed,
        ),
        Command::Ablate { grid, config } => ablate::cmd_ablate(wd, &grid, &config),
    }
}

/// Short machine-readable class of a failure.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    use scalar_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } => "io",
                E::MalformedHeader { .. } | E::Truncated { .. } | E::VersionMismatch { .. } | E::Checkpoint(_) => {
                    "checkpoint"
                }
                E::Manifest(_) => "data",
                E::Invalid(_) | E::OutOfRange { .. } => "invalid",
                E::ShapeMismatch { .. } | E::Cache(_) => "internal",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "invalid"
}

/// One line: `error[<kind>]: <message chain>`.
pub fn error_line(err: &anyhow::Error) -> String {
    let msg = format!("{err:#}").replace('\n', " ");
    format!("error[{}]: {}", error_kind(err), msg)
}

/// Parses `args`, runs, and maps every failure to one stderr line plus an exit code.
pub fn main_with(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            let usage = text
                .lines()
                .find_map(|l| l.trim().strip_prefix("Usage: "))
                .unwrap_or("scalar --help");
            eprintln!("error[usage]: {first} (usage: {usage})");
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}
