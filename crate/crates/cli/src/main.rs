use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ddsde_cli::{run, Command};

#[derive(Parser)]
#[command(name = "ddsde", version, about = "Flows and extrinsic-derivative estimators for distribution-dependent SDEs")]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Worker threads; all available cores by default. Results do not depend on it.
    #[arg(short, long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    if let Some(n) = args.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not start {n} workers: {e}");
            return ExitCode::from(1);
        }
    }
    ExitCode::from(run(args.command, &args.config, args.output.as_deref()) as u8)
}
