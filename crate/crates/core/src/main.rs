//! `worldrep` command line: run the experiment pipeline from a config file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use worldrep::config::{config_hash_scaled, ExperimentConfig, Scale};
use worldrep::pipeline::Pipeline;

#[derive(Parser)]
#[command(
    name = "worldrep",
    about = "Build a city world, generate geometric task datasets, train small \
             autoregressive transformers, and analyze their world representations.",
    version
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config's `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Size preset: `desk` uses the config as written, `paper` overlays the
    /// full-scale recipe (1M rows/task, 42M training rows, 6-layer model).
    #[arg(long, global = true, value_enum, default_value_t = CliScale::Desk)]
    scale: CliScale,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliScale {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Build and save the world (plus atlantis when configured).
    World,
    /// Materialize pretraining, fine-tuning and eval datasets.
    Gen,
    /// Pretrain the lineage model and any sweep models.
    Pretrain,
    /// Fine-tune the configured recipes from the pretrained checkpoint.
    Finetune,
    /// Evaluate checkpoints; write reports, baselines, NI and deviations.
    Eval,
    /// Extract representations; probes, PCA, transfer, CKA.
    Analyze,
    /// Render SVG figures from eval/analysis outputs.
    Report,
    /// Run every stage in order.
    All,
}

fn run() -> worldrep::Result<()> {
    let cli = Cli::parse();
    let config_path = cli
        .config
        .ok_or_else(|| worldrep::Error::Config("--config is required".into()))?;
    let text = std::fs::read_to_string(&config_path)
        .map_err(|e| worldrep::Error::io(&config_path, e))?;
    let (mut cfg, _) = ExperimentConfig::load(&config_path)?;
    let scale = match cli.scale {
        CliScale::Desk => Scale::Desk,
        CliScale::Paper => Scale::Paper,
    };
    cfg.apply_scale(scale);
    let mut effective = text;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        effective = format!("{effective}\n#seed={seed}");
    }
    let hash = config_hash_scaled(&effective, scale);
    let out = cli
        .out
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| worldrep::Error::Config("no output dir: set `out` or pass --out".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| worldrep::Error::io(&out, e))?;

    let pipeline = Pipeline::new(cfg, hash, out);
    match cli.command {
        Command::World => pipeline.run_world(),
        Command::Gen => pipeline.run_gen(),
        Command::Pretrain => pipeline.run_pretrain(),
        Command::Finetune => pipeline.run_finetune(),
        Command::Eval => pipeline.run_eval(),
        Command::Analyze => pipeline.run_analyze(),
        Command::Report => pipeline.run_report(),
        Command::All => pipeline.run_all(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
