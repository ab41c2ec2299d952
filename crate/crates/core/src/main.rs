use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use offgrid_kspace::experiment::{cmd_evaluate, cmd_fdcheck, cmd_generate, cmd_optimize, cmd_reconstruct, RunConfig};

#[derive(Parser)]
#[command(name = "offgrid-kspace", version, about = "Off-grid k-space sampling pattern optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the base seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the LF and VDS baseline patterns.
    Generate(Common),
    /// Optimize sampling patterns starting from VDS.
    Optimize(Common),
    /// Reconstruct the configured phantoms from a saved pattern.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pattern: PathBuf,
    },
    /// Run the full LF / VDS / OSP comparison and write psnr.csv.
    Evaluate(Common),
    /// Validate gradients against finite differences.
    Fdcheck(Common),
}

fn load(common: &Common) -> offgrid_kspace::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> offgrid_kspace::Result<PathBuf> {
    match cli.command {
        Command::Generate(c) => cmd_generate(&load(&c)?, &c.out),
        Command::Optimize(c) => cmd_optimize(&load(&c)?, &c.out),
        Command::Reconstruct { common, pattern } => cmd_reconstruct(&load(&common)?, &pattern, &common.out),
        Command::Evaluate(c) => cmd_evaluate(&load(&c)?, &c.out),
        Command::Fdcheck(c) => cmd_fdcheck(&load(&c)?, &c.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
