//! The `gtp` command line: one subcommand per pipeline stage.
//!
//! Science parameters come from a single JSON config (`--config`); flags
//! carry only paths, seeds and the few counts that pick what to run.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use gtp_core::pipeline::{self, RunConfig};
use gtp_core::GtpError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] GtpError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gtp", version, about = "Patch-graph transformer pipeline on synthetic slides")]
pub struct Cli {
    /// Run configuration (JSON); omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a class-balanced synthetic slide dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        slides: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cut slides into patches and drop background.
    Tile {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastively pretrain the patch encoder on tiled patches.
    Pretrain {
        #[arg(long)]
        tiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Embed every kept patch with a pretrained encoder.
    Embed {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        tiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble one graph container per slide.
    BuildGraph {
        #[arg(long)]
        tiles: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with k-fold cross-validation (k = 1 uses the dataset splits).
    Train {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated slide ids; defaults to the fold's held-out slides.
        #[arg(long, value_delimiter = ',')]
        slides: Option<Vec<String>>,
    },
    /// Write a GraphCAM heatmap for one slide.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        slide: String,
        /// Target class; defaults to the predicted class.
        #[arg(long = "class")]
        class: Option<usize>,
        /// Dataset directory, for the overlay image and the IoU against the mask.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate every point of the configured hyperparameter grid.
    Ablate {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn checked(cfg: RunConfig) -> Result<RunConfig, CliError> {
    cfg.validate().map_err(|e| GtpError::validation("config", e.to_string()))?;
    Ok(cfg)
}

/// Runs one parsed command, returning the lines to print.
pub fn execute(cli: Cli) -> Result<Vec<String>, CliError> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let mut lines = Vec::new();
    match cli.command {
        Command::Synth { out, slides, seed } => {
            if let Some(n) = slides {
                if n == 0 {
                    return Err(CliError::Usage("--slides must be positive".into()));
                }
                cfg.dataset.slides = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let m = pipeline::generate_dataset(&checked(cfg)?, &out)?;
            lines.push(format!("wrote {} slides to {}", m.slides.len(), out.display()));
        }
        Command::Tile { data, out } => {
            let idx = pipeline::tile_dataset(&checked(cfg)?, &data, &out)?;
            let kept: usize = idx.slides.iter().map(|s| s.coords.len()).sum();
            lines.push(format!("tiled {} slides, {kept} tissue patches", idx.slides.len()));
        }
        Command::Pretrain { tiles, out, seed } => {
            if let Some(s) = seed {
                cfg.pretrain.seed = s;
            }
            let (_, log) = pipeline::pretrain_stage(&checked(cfg)?, &tiles, &out)?;
            if let (Some(a), Some(b)) = (log.first(), log.last()) {
                lines.push(format!("contrastive loss {:.4} -> {:.4} over {} steps", a.loss, b.loss, log.len()));
            }
        }
        Command::Embed { encoder, tiles, out } => {
            let idx = pipeline::embed_stage(&checked(cfg)?, &encoder, &tiles, &out)?;
            lines.push(format!("embedded {} slides at width {}", idx.slides.len(), idx.embed_dim));
        }
        Command::BuildGraph { tiles, embeddings, out } => {
            let idx = pipeline::build_graph_stage(&checked(cfg)?, &tiles, &embeddings, &out)?;
            lines.push(format!("built {} graphs", idx.graphs.len()));
        }
        Command::Train { graphs, out, folds, seed } => {
            if let Some(k) = folds {
                if k == 0 {
                    return Err(CliError::Usage("--folds must be positive".into()));
                }
                cfg.folds = k;
            }
            if let Some(s) = seed {
                cfg.model.seed = s;
            }
            let s = pipeline::train_stage(&checked(cfg)?, &graphs, &out)?;
            let acc = s.summary.accuracy;
            lines.push(format!("{} folds: accuracy {:.3} ± {:.3}", s.folds, acc.mean, acc.std));
            if let Some(auc) = s.summary.macro_auc {
                lines.push(format!("macro AUC {:.3} ± {:.3}", auc.mean, auc.std));
            }
        }
        Command::Eval { model, graphs, out, slides } => {
            let r = pipeline::eval_stage(&checked(cfg)?, &model, &graphs, slides, &out)?;
            lines.push(format!("{} slides: accuracy {:.3}", r.samples, r.accuracy()));
        }
        Command::Explain {
            model,
            graphs,
            slide,
            class,
            data,
            out,
        } => {
            let s = pipeline::explain_stage(&checked(cfg)?, &model, &graphs, data.as_deref(), &slide, class, &out)?;
            let mut line = format!("{} class {} (p={:.3})", s.slide_id, s.target_class, s.class_probability);
            if let Some(iou) = s.max_iou {
                line.push_str(&format!(", max IoU {iou:.3}"));
            }
            lines.push(line);
        }
        Command::Ablate { graphs, out, seed } => {
            if let Some(s) = seed {
                cfg.model.seed = s;
            }
            let table = pipeline::ablate_stage(&checked(cfg)?, &graphs, &out)?;
            lines.extend(table.to_text().lines().map(str::to_string));
        }
    }
    Ok(lines)
}

/// Parses `args` (program name first), runs, prints, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
