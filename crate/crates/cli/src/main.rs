//! `forensic-transfer` command-line experiments.
//!
//! Every command resolves a config file plus flag overrides into one
//! [`config::ExperimentConfig`], writes its artifacts under
//! `<out>/<command>-<key>` and prints that directory on success.

mod commands;
mod config;
mod error;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use forensic_transfer::{Manipulation, Split};

use config::{resolve_file, resolve_manifest, ExperimentConfig, Pair, Variant};
use error::{usage, CliError};
use run_dir::RunDir;

const LATENT_SIZES: [usize; 5] = [32, 64, 128, 256, 512];

#[derive(Parser)]
#[command(name = "forensic-transfer", version, about = "Transferable forgery detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic real/fake corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Manipulation applied to the fakes.
        #[arg(long)]
        spec: Option<Manipulation>,
        /// Pairs per class.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        strength: Option<f32>,
    },
    /// Train a detector on one or more source corpora.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        source: Vec<PathBuf>,
    },
    /// Fine-tune a checkpoint on a few target examples and evaluate it.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Evaluate a checkpoint and export its activation scatter.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Compare training variants (and optionally latent sizes) on one pairing.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        pair: Option<Pair>,
        #[arg(long)]
        source: Vec<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        #[arg(long)]
        runs: Option<usize>,
        /// Source pairs per class when generating a pairing.
        #[arg(long)]
        n: Option<usize>,
        /// Target pairs per class when generating a pairing.
        #[arg(long)]
        target_n: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        latent_sweep: Option<Vec<usize>>,
    },
}

fn base_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn check_latent(latent: usize) -> Result<(), CliError> {
    if LATENT_SIZES.contains(&latent) {
        Ok(())
    } else {
        Err(usage(format!("--latent must be one of {LATENT_SIZES:?}, got {latent}")))
    }
}

fn apply_model(cfg: &mut ExperimentConfig, model: &ModelFlags) -> Result<(), CliError> {
    if let Some(v) = model.variant {
        cfg.variant = v;
    }
    if let Some(l) = model.latent {
        check_latent(l)?;
        cfg.set_latent(l);
    }
    if let Some(e) = model.max_epochs {
        cfg.train.max_epochs = e;
    }
    Ok(())
}

/// Makes every input path absolute so the run key does not depend on the
/// working directory.
fn resolve_paths(cfg: &mut ExperimentConfig) -> Result<(), CliError> {
    cfg.paths.sources = cfg
        .paths
        .sources
        .iter()
        .map(|p| resolve_manifest(p))
        .collect::<Result<_, _>>()?;
    if let Some(t) = &cfg.paths.target {
        cfg.paths.target = Some(resolve_manifest(t)?);
    }
    if let Some(c) = &cfg.paths.checkpoint {
        cfg.paths.checkpoint = Some(resolve_file(c, "checkpoint")?);
    }
    Ok(())
}

/// Rejects incomplete configs before a run directory is created.
fn check_inputs(name: &str, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let invalid = |e: forensic_transfer::Error| usage(e.to_string());
    cfg.arch.validate().map_err(invalid)?;
    cfg.train_config().validate().map_err(invalid)?;
    let needs_sweep = matches!(name, "finetune" | "ablate");
    if needs_sweep {
        if cfg.runs == 0 {
            return Err(usage("--runs must be at least 1"));
        }
        if cfg.shots.is_empty() || cfg.shots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(usage("--shots must be a strictly increasing list"));
        }
    }
    let needs_sources = name == "train" || (name == "ablate" && cfg.pair.is_none());
    if needs_sources && cfg.paths.sources.is_empty() {
        return Err(usage("at least one --source manifest is required"));
    }
    let needs_target = matches!(name, "finetune" | "eval") || (name == "ablate" && cfg.pair.is_none());
    if needs_target && cfg.paths.target.is_none() {
        return Err(usage("a --target manifest is required"));
    }
    if matches!(name, "finetune" | "eval") && cfg.paths.checkpoint.is_none() {
        return Err(usage("a --checkpoint is required"));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let (name, common, cfg): (&str, &Common, ExperimentConfig) = match &cli.command {
        Command::GenData {
            common,
            spec,
            n,
            size,
            strength,
        } => {
            let mut cfg = base_config(common)?;
            if let Some(m) = spec {
                cfg.data.manipulation = *m;
            }
            if let Some(n) = n {
                cfg.data.n_per_class = *n;
            }
            if let Some(s) = size {
                cfg.data.size = *s;
            }
            if let Some(s) = strength {
                cfg.data.strength = *s;
            }
            cfg.data.validate().map_err(|e| usage(e.to_string()))?;
            ("gen-data", common, cfg)
        }
        Command::Train {
            common,
            model,
            source,
        } => {
            let mut cfg = base_config(common)?;
            apply_model(&mut cfg, model)?;
            if !source.is_empty() {
                cfg.paths.sources = source.clone();
            }
            ("train", common, cfg)
        }
        Command::Finetune {
            common,
            model,
            checkpoint,
            target,
            shots,
            runs,
        } => {
            let mut cfg = base_config(common)?;
            apply_model(&mut cfg, model)?;
            if checkpoint.is_some() {
                cfg.paths.checkpoint = checkpoint.clone();
            }
            if target.is_some() {
                cfg.paths.target = target.clone();
            }
            if let Some(s) = shots {
                cfg.shots = s.clone();
            }
            if let Some(r) = runs {
                cfg.runs = *r;
            }
            ("finetune", common, cfg)
        }
        Command::Eval {
            common,
            checkpoint,
            target,
            split,
        } => {
            let mut cfg = base_config(common)?;
            if checkpoint.is_some() {
                cfg.paths.checkpoint = checkpoint.clone();
            }
            if target.is_some() {
                cfg.paths.target = target.clone();
            }
            if let Some(s) = split {
                cfg.split = *s;
            }
            ("eval", common, cfg)
        }
        Command::Ablate {
            common,
            model,
            pair,
            source,
            target,
            shots,
            runs,
            n,
            target_n,
            latent_sweep,
        } => {
            let mut cfg = base_config(common)?;
            apply_model(&mut cfg, model)?;
            // A single --variant narrows the matrix instead of picking the recipe.
            if let Some(v) = model.variant {
                cfg.variant = Variant::Full;
                cfg.variants = vec![v];
            }
            if pair.is_some() {
                cfg.pair = *pair;
            }
            if !source.is_empty() {
                cfg.paths.sources = source.clone();
            }
            if target.is_some() {
                cfg.paths.target = target.clone();
            }
            if let Some(s) = shots {
                cfg.shots = s.clone();
            }
            if let Some(r) = runs {
                cfg.runs = *r;
            }
            if let Some(n) = n {
                cfg.data.n_per_class = *n;
            }
            if let Some(n) = target_n {
                cfg.target_per_class = *n;
            }
            if let Some(l) = latent_sweep {
                for &size in l {
                    check_latent(size)?;
                }
                cfg.latent_sweep = l.clone();
            }
            if cfg.pair.is_some() && (!cfg.paths.sources.is_empty() || cfg.paths.target.is_some()) {
                return Err(usage("--pair generates its own corpora; drop --source/--target"));
            }
            ("ablate", common, cfg)
        }
    };
    let mut cfg = cfg;
    resolve_paths(&mut cfg)?;
    check_inputs(name, &cfg)?;
    let run = RunDir::create(&common.out, name, &cfg, common.force)?;
    match name {
        "gen-data" => commands::gen_data(&cfg, &run)?,
        "train" => commands::train(&cfg, &run)?,
        "finetune" => commands::finetune(&cfg, &run)?,
        "eval" => commands::eval(&cfg, &run)?,
        _ => commands::ablate(&cfg, &run)?,
    }
    Ok(run.path)
}

fn main() -> ExitCode {
    forensic_transfer::runtime::retain_freed_memory();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
