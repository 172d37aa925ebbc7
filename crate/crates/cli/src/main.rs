//! lenspatch command-line interface.
//!
//! Exit codes: 0 success, 1 user error (config, paths, malformed input),
//! 2 internal invariant failure.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "lenspatch", version, about = "Translucent lens-patch attack toolkit")]
struct Cli {
    /// Run configuration file (required).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the executed command's primary seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (pool + held-out test) with manifests.
    GenData,
    /// Train the toy grid detector and write its checkpoint.
    TrainDetector,
    /// Annotate a manifest's images with the detector's own detections.
    SelfLabel {
        /// Manifest to annotate.
        #[arg(long)]
        manifest: PathBuf,
        /// Output manifest path; images are rewritten next to it.
        #[arg(long)]
        out_manifest: PathBuf,
    },
    /// Optimize a patch; writes patch.toml and history.csv.
    Train,
    /// Evaluate a saved patch under the configured conditions.
    Eval {
        /// Saved patch document (required for the PATCH condition).
        #[arg(long)]
        patch: Option<PathBuf>,
        /// Comma-separated subset of CLEAN,PATCH,RANDOM,RED,CYAN.
        #[arg(long, value_delimiter = ',')]
        conditions: Option<Vec<String>>,
    },
    /// Optimize-then-evaluate across one manual parameter axis.
    Sweep {
        /// n_shapes or alpha_max.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values along the axis.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Grid search over loss-weight tuples.
    GridSearch,
    /// Render a saved patch to an RGBA preview raster.
    Render {
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Export a print-ready raster plus the parameter descriptor.
    Export {
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        dpi: Option<f64>,
        #[arg(long)]
        width_in: Option<f64>,
        #[arg(long)]
        height_in: Option<f64>,
    },
}

fn run(cli: Cli) -> lenspatch::Result<()> {
    let config_path = cli.config.ok_or_else(|| {
        lenspatch::Error::Invalid("--config PATH is required".into())
    })?;
    let mut cfg = RunConfig::load(&config_path)?;
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    match cli.command {
        Command::GenData => commands::cmd_gen_data(&cfg, cli.seed),
        Command::TrainDetector => commands::cmd_train_detector(&cfg, cli.seed),
        Command::SelfLabel {
            manifest,
            out_manifest,
        } => commands::cmd_self_label(&cfg, &manifest, &out_manifest),
        Command::Train => commands::cmd_train(&cfg, cli.seed),
        Command::Eval { patch, conditions } => {
            commands::cmd_eval(&cfg, patch.as_deref(), conditions)
        }
        Command::Sweep { axis, values } => commands::cmd_sweep(&cfg, axis, values),
        Command::GridSearch => commands::cmd_grid_search(&cfg),
        Command::Render {
            patch,
            width,
            height,
        } => commands::cmd_render(&cfg, &patch, width, height),
        Command::Export {
            patch,
            dpi,
            width_in,
            height_in,
        } => commands::cmd_export(&cfg, &patch, dpi, width_in, height_in),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(if e.is_user_error() { 1 } else { 2 });
    }
}
