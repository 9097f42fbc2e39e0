//! `sonoresnet`: synthetic data, splitting, training, evaluation, Grad-CAM
//! and gradient checks from one binary.
//!
//! Exit codes: 0 success, 1 a check failed, 2 bad input, 3 training diverged.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sonoresnet::data::Split;
use sonoresnet::Error;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "sonoresnet", version, about = "Residual-network appendicitis classifier for ultrasound images")]
struct Cli {
    /// Run configuration (JSON). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker thread; outputs are byte-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for per-sample parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Write 0 instead of wall-clock seconds in logs.
    #[arg(long, global = true)]
    no_timestamps: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a planted-patch synthetic dataset.
    Synth {
        /// Dataset directory (overrides `dataset_root`).
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        subjects: Option<usize>,
        /// Image side in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Build the subject-grouped stratified manifest.
    Split {
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train with early stopping on the validation split.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score a split and write the metrics report.
    Eval {
        /// Defaults to `<output>/best.w`.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write Grad-CAM heatmaps and overlays.
    Gradcam {
        #[arg(long)]
        weights: Option<PathBuf>,
        /// `<subject>.<view>`; repeatable.
        #[arg(long = "sample")]
        samples: Vec<String>,
        /// Every view of this split.
        #[arg(long)]
        split: Option<Split>,
        /// Target layer; defaults to the last convolution.
        #[arg(long)]
        layer: Option<String>,
        /// Explain the negative class.
        #[arg(long)]
        negate: bool,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Finite-difference gradient checks over every op.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Break one op's backward rule to prove the check catches it.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } => 3,
        _ => 2,
    }
}

fn resolve_config(cli: &Cli) -> sonoresnet::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.output {
        cfg.output_dir = out.clone();
    }
    match &cli.command {
        Command::Synth { root, subjects, size } => {
            if let Some(r) = root {
                cfg.labels_csv = r.join("labels.csv");
                cfg.dataset_root = r.clone();
            }
            if let Some(n) = subjects {
                cfg.synth.subjects = *n;
            }
            if let Some(s) = size {
                cfg.synth.size = *s;
            }
        }
        Command::Split { root, labels, manifest } => {
            if let Some(r) = root {
                cfg.dataset_root = r.clone();
            }
            if let Some(l) = labels {
                cfg.labels_csv = l.clone();
            }
            if let Some(m) = manifest {
                cfg.manifest_path = m.clone();
            }
        }
        Command::Train { manifest } | Command::Eval { manifest, .. } | Command::Gradcam { manifest, .. } => {
            if let Some(m) = manifest {
                cfg.manifest_path = m.clone();
            }
        }
        Command::Gradcheck { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> sonoresnet::Result<u8> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Synth { .. } => commands::synth(&cfg)?,
        Command::Split { .. } => commands::split(&cfg)?,
        Command::Train { .. } => commands::train(&cfg, !cli.no_timestamps)?,
        Command::Eval {
            weights,
            split,
            threshold,
            ..
        } => commands::eval(&cfg, weights.as_deref(), *split, *threshold)?,
        Command::Gradcam {
            weights,
            samples,
            split,
            layer,
            negate,
            ..
        } => commands::gradcam_cmd(
            &cfg,
            &commands::CamArgs {
                weights: weights.as_deref(),
                samples,
                split: *split,
                layer: layer.clone(),
                negate: *negate,
            },
        )?,
        Command::Gradcheck { seeds, inject_fault } => {
            if !commands::gradcheck(*seeds, inject_fault.as_deref())? {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let workers = if cli.deterministic { Some(1) } else { cli.workers };
    if let Some(n) = workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
