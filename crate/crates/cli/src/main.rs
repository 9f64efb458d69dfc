use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use chaoslab_cli::{exit_code, parse_config, recipes, run_recipe, Inputs, Recipe, Status, EXIT_AUDIT};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chaoslab", version, about = "Mean-field particle systems with singular interactions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Thermal equilibrium, its convexity constant and a minimizer check.
    Equilibrium(Common),
    /// Mean-field Fokker-Planck evolution with free-energy records.
    Meanfield(Common),
    /// SDE or MALA particle ensembles with marginal distances.
    Particles(Common),
    /// Tensor-grid N-body evolution with the modulated free-energy audits.
    Liouville(Common),
    /// Partition-function estimates, moment identity and snapshot functionals.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Directory holding particle snapshots and their index.csv.
        #[arg(long)]
        snapshots: Option<PathBuf>,
        /// Reference density CSV with columns x,value.
        #[arg(long)]
        density: Option<PathBuf>,
    },
    /// Equilibrium, mean-field and tensor-grid runs summarized in summary.json.
    ChaosReport(Common),
    /// Print the configuration with every default filled in.
    ShowConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides ensemble.master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to CHAOSLAB_THREADS, then to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    let from_env = std::env::var("CHAOSLAB_THREADS").ok().map(|v| v.parse::<usize>()).transpose();
    let n = match threads {
        Some(n) => Some(n),
        None => from_env.context("CHAOSLAB_THREADS must be a positive integer")?,
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load(path: &PathBuf) -> Result<chaoslab_cli::ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(parse_config(&text)?)
}

fn run(cli: Cli) -> Result<bool> {
    let (recipe, common, inputs) = match cli.command {
        Command::ShowConfig { config } => {
            print!("{}", load(&config)?.to_toml());
            return Ok(true);
        }
        Command::Equilibrium(c) => (Recipe::Equilibrium, c, Inputs::default()),
        Command::Meanfield(c) => (Recipe::Meanfield, c, Inputs::default()),
        Command::Particles(c) => (Recipe::Particles, c, Inputs::default()),
        Command::Liouville(c) => (Recipe::Liouville, c, Inputs::default()),
        Command::ChaosReport(c) => (Recipe::ChaosReport, c, Inputs::default()),
        Command::Diagnose { common, snapshots, density } => (Recipe::Diagnose, common, Inputs { snapshots, density }),
    };
    init_threads(common.threads)?;
    let mut cfg = load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.ensemble.master_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.display().to_string();
    }
    let outcome = run_recipe(recipe, &cfg, std::path::Path::new(&cfg.output_dir), &inputs)?;
    for a in &outcome.audits {
        let margin = a.worst_margin.map_or("-".to_string(), |m| format!("{m:.3e}"));
        let status = match a.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::NotApplicable => "N/A ",
        };
        println!("{status} {:<26} worst margin {margin:>11}  ({})", a.name, a.source);
    }
    for m in &outcome.metrics {
        println!("     {:<26} {:>11}  ({})", m.name, m.value.map_or("-".to_string(), |v| format!("{v:.4e}")), m.source);
    }
    log::info!("schema version {}", recipes::SCHEMA_VERSION);
    Ok(outcome.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_AUDIT as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
