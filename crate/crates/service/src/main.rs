use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skinmap_service::eval::evaluate_session;
use skinmap_service::{run_pipeline, synthesize, PipelineConfig, SessionManifest, Stage};
use tracing_subscriber::EnvFilter;

/// Skin lesion mapping pipeline.
#[derive(Debug, Parser)]
#[command(name = "slm", version)]
struct Cli {
    /// Session directory to operate on.
    #[arg(long, global = true)]
    session: Option<PathBuf>,
    /// JSON configuration file; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic phantom session with ground truth.
    Synth,
    /// Render depth maps and subject masks from the mesh and cameras.
    Preprocess,
    /// Detect lesions in every image (or ingest external detections).
    Detect,
    /// Lift detections to 3D and cluster them into global lesions.
    Fuse,
    /// Match this session's lesions against an earlier session.
    Track {
        /// Earlier session; overrides `track.previous_session`.
        #[arg(long)]
        previous: Option<PathBuf>,
    },
    /// Score the session against its ground truth.
    Eval,
    /// Serve the sessions under a root directory over HTTP.
    Serve {
        #[arg(long, default_value = ".")]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
}

fn print_flags(m: &SessionManifest) {
    println!(
        "{}: rendered={} detected={} fused={} tracked={}",
        m.session_id, m.stages.rendered, m.stages.detected, m.stages.fused, m.stages.tracked
    );
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let session = || cli.session.clone().ok_or("--session is required for this command");
    match cli.command {
        Command::Synth => print_flags(&synthesize(&session()?, &cfg)?),
        Command::Preprocess => print_flags(&run_pipeline(&session()?, &[Stage::Preprocess], &cfg)?),
        Command::Detect => print_flags(&run_pipeline(&session()?, &[Stage::Detect], &cfg)?),
        Command::Fuse => print_flags(&run_pipeline(&session()?, &[Stage::Fuse], &cfg)?),
        Command::Track { previous } => {
            if previous.is_some() {
                cfg.track.previous_session = previous;
            }
            print_flags(&run_pipeline(&session()?, &[Stage::Track], &cfg)?)
        }
        Command::Eval => {
            let report = evaluate_session(&session()?, cfg.fuse.min_cluster_size)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Serve { root, bind } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(skinmap_service::server::serve(root, bind))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
