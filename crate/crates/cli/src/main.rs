use std::path::PathBuf;

use clap::Parser;
use hiconcept_cli::{run, Command, Overrides, RunConfig};

/// Discover concepts in the hidden layers of a trained classifier.
#[derive(Debug, Parser)]
#[command(name = "hiconcept", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration; defaults are used for anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set concept.n=12`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed for concept training.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (otherwise report.out_dir, then $HICONCEPT_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let ov = Overrides {
        sets: args.sets,
        seed: args.seed,
        out: args.out,
    };
    let result = RunConfig::load(args.config.as_deref(), &ov).and_then(|cfg| run(args.command, &cfg));
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
