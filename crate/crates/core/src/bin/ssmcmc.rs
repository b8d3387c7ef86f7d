use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use subsample_mcmc::experiment::{
    cmd_analyze, cmd_compare, cmd_generate, cmd_run, load_dataset, parse_config, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "ssmcmc", about = "Exact subsampling MCMC experiment harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic AR(1) dataset and its manifest.
    Generate {
        /// Path to a `key = value` config file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one chain (exact MH or signed pseudo-marginal) on a dataset.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Dataset CSV produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Label naming the chain/metadata output files.
        #[arg(long, default_value = "chain")]
        label: String,
    },
    /// Build quantile/cost tables and KDE grids from finished chains.
    Analyze {
        /// Directory holding `<label>.chain.csv` / `<label>.meta.json` pairs.
        #[arg(long)]
        dir: PathBuf,
        /// Label of the exact-MH baseline chain.
        #[arg(long, default_value = "mh")]
        baseline: String,
        /// Labels of the chains to compare against the baseline.
        #[arg(long, required = true, num_args = 1..)]
        chains: Vec<String>,
    },
    /// Run the full method matrix against an exact-MH baseline and analyze it.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn read_config(path: &PathBuf) -> subsample_mcmc::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut config = parse_config(&text)?;
    config.apply_env_override();
    Ok(config)
}

fn run(cli: Cli) -> subsample_mcmc::Result<()> {
    match cli.command {
        Command::Generate { config } => {
            let config = read_config(&config)?;
            let path = cmd_generate(&config)?;
            println!("{}", path.display());
        }
        Command::Run { config, data, label } => {
            let config = read_config(&config)?;
            let dataset = load_dataset(&data)?;
            let artifacts = cmd_run(&config, &dataset, &label)?;
            println!("{}", artifacts.chain_path.display());
        }
        Command::Analyze { dir, baseline, chains } => {
            cmd_analyze(&chains, &baseline, &dir)?;
            println!("{}", dir.join("quantile_table.csv").display());
        }
        Command::Compare { config, data } => {
            let config = read_config(&config)?;
            let dataset = load_dataset(&data)?;
            cmd_compare(&config, &dataset)?;
            println!("{}", config.output_dir.join("cost_table.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Machine-readable error envelope on stderr.
            let payload = serde_json::json!({
                "error": err.to_string(),
                "kind": format!("{err:?}").split(['(', ' ', '{']).next().unwrap_or("Unknown"),
            });
            eprintln!("{payload}");
            ExitCode::from(1)
        }
    }
}
