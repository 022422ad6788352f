use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fairtensor_cli::{gen_synth, load_config, load_synth_spec, report, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fairtensor", version, about = "Fairness-aware sparse tensor completion experiments")]
struct Cli {
    /// Print the default experiment config and exit.
    #[arg(long)]
    print_defaults: bool,
    /// Use this single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every grid point of an experiment config.
    Run {
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a results directory into a trade-off table.
    Report { dir: PathBuf },
    /// Generate a synthetic dataset from a TOML spec.
    GenSynth { spec: PathBuf, out: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if cli.print_defaults {
        print!("{}", ExperimentConfig::default().to_toml());
        return Ok(());
    }
    match cli.command {
        Some(Command::Run { config, out }) => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seeds = vec![seed];
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let outcome = run_experiment(&cfg, cli.workers)?;
            println!("{} rows written to {}", outcome.rows.len(), outcome.output_dir.join("results.csv").display());
        }
        Some(Command::Report { dir }) => print!("{}", report::report(&dir)?),
        Some(Command::GenSynth { spec, out }) => {
            let mut spec = load_synth_spec(&spec)?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            gen_synth(&spec, &out)?;
            println!("wrote {}", out.display());
        }
        None => anyhow::bail!("no command given; see --help"),
    }
    Ok(())
}
