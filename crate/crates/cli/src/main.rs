use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedgrad::coverage::{montecarlo_pair_coverage, theorem1_bound, CoverageMode};
use fedgrad::experiment::{run_experiment, ExperimentConfig, RunOptions};

/// Environment variable that overrides the output directory of `run`.
const OUT_DIR_ENV: &str = "FEDGRAD_OUT_DIR";

#[derive(Parser)]
#[command(name = "fedgrad", version, about = "Federated backdoor attack / defense simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Direct,
    Transitive,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: config `output.dir`, or `$FEDGRAD_OUT_DIR`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from `checkpoint.json` in the output directory.
        #[arg(long)]
        resume: bool,
        /// Worker threads for local training.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate the closed-form round bound for n clients, K per round.
    Bound {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
    },
    /// Monte-Carlo estimate of rounds until every client pair has met.
    Mc {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Mode::Direct)]
        mode: Mode,
    },
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>, resume: bool, threads: Option<usize>) -> ExitCode {
    // Parse and validate before anything touches the filesystem.
    let mut cfg = match ExperimentConfig::load(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let mut flags = BTreeMap::new();
    flags.insert("config".to_owned(), config.display().to_string());
    if let Some(s) = seed {
        cfg.seed = s;
        flags.insert("seed".to_owned(), s.to_string());
    }
    let env_out = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
    if let Some(d) = &env_out {
        flags.insert(OUT_DIR_ENV.to_owned(), d.display().to_string());
    }
    if let Some(d) = &out {
        flags.insert("out".to_owned(), d.display().to_string());
    }
    if resume {
        flags.insert("resume".to_owned(), "true".to_owned());
    }
    if let Some(t) = threads {
        flags.insert("threads".to_owned(), t.to_string());
    }
    let opts = RunOptions {
        out_dir: out.or(env_out),
        resume,
        threads,
        stop_after: None,
        flags,
    };
    let base = config.parent().unwrap_or(Path::new("."));
    match run_experiment(&cfg, base, &opts) {
        Ok(outcome) => {
            let s = &outcome.summary;
            println!(
                "{}: {} rounds, final MA {:.4}, final BA {:.4}",
                s.name,
                s.rounds_completed,
                s.final_ma.unwrap_or(f64::NAN),
                s.final_ba.unwrap_or(f64::NAN)
            );
            if let Some(dir) = outcome.out_dir {
                println!("outputs in {}", dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, out, resume, threads } => run(&config, seed, out, resume, threads),
        Command::Bound { n, k } => match theorem1_bound(n, k) {
            Ok(b) => {
                println!("{b}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Command::Mc { n, k, trials, seed, mode } => {
            let mode = match mode {
                Mode::Direct => CoverageMode::Direct,
                Mode::Transitive => CoverageMode::Transitive,
            };
            match montecarlo_pair_coverage(n, k, trials, seed, mode) {
                Ok(est) => {
                    println!("{}", serde_json::to_string(&est).expect("plain struct serializes"));
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
