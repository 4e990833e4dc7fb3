use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use specfuse::config::{RunConfig, Workflow};
use specfuse::workflow::{run, RunOptions};
use specfuse::Error;

#[derive(Parser)]
#[command(name = "specfuse", version, about = "Hyperspectral and multispectral image fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade a reference image into HS and MS observations.
    Simulate(Args),
    /// Fuse HS and MS observations into a high-resolution HS image.
    Fuse(Args),
    /// Compare a fused image (and optionally a baseline) with the reference.
    Evaluate(Args),
    /// Fuse and evaluate over a list of parameter values.
    Sweep(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides paths.out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scenario, synthetic scene and dictionary seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the rough estimate, supports and learning traces.
    #[arg(long)]
    dump_intermediates: bool,
    /// Load basis and dictionaries from the output directory instead of
    /// learning them.
    #[arg(long)]
    reuse_dictionaries: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (workflow, args) = match cli.command {
        Command::Simulate(a) => (Workflow::Simulate, a),
        Command::Fuse(a) => (Workflow::Fuse, a),
        Command::Evaluate(a) => (Workflow::Evaluate, a),
        Command::Sweep(a) => (Workflow::Sweep, a),
    };
    match execute(workflow, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(workflow: Workflow, args: &Args) -> Result<(), Error> {
    let mut cfg = RunConfig::load(&args.config)?;
    if cfg.workflow != workflow {
        log::warn!("config declares workflow {:?}; running {:?}", cfg.workflow, workflow);
        cfg.workflow = workflow;
        cfg.validate()?;
    }
    let opts = RunOptions {
        out_dir: args.out.clone(),
        seed: args.seed,
        dump_intermediates: args.dump_intermediates,
        reuse_dictionaries: args.reuse_dictionaries,
    };
    run(&cfg, &opts)
}
