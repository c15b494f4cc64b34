use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use opendec_core::pipeline::{exit_code, Pipeline, RunConfig, Stage};
use opendec_core::Error;

/// Run one stage (or all) of the score-modulated RAG pipeline.
#[derive(Debug, Parser)]
#[command(name = "opendec", version)]
struct Args {
    /// TOML run configuration; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,

    /// corpus, retrieve, indicators, train, eval, ablate, sweep or all.
    #[arg(long, default_value = "all")]
    stage: String,

    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,

    /// Query-level worker threads in eval and ablate.
    #[arg(long)]
    workers: Option<usize>,

    /// Run directory; overrides the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_logging() {
    let level = std::env::var("OPENDEC_LOG").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
}

fn load(args: &Args) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
            RunConfig::from_toml_str(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(args: &Args) -> Result<(), Error> {
    let stage: Stage = args.stage.parse()?;
    let cfg = load(args)?;
    Pipeline::new(cfg)?.run(stage)
}

fn main() -> ExitCode {
    init_logging();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
