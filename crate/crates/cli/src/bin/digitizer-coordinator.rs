//! Coordinator daemon: accepts node agents and serves the operator API.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use digitizer_cli::server::{self, ServerConfig};
use digitizer_core::coordinator::CoordinatorConfig;

#[derive(Debug, Parser)]
#[command(name = "digitizer-coordinator", version, about = "Capture rig coordinator")]
struct Args {
    /// Listen address for node agents.
    #[arg(long, default_value = "0.0.0.0:7070")]
    agents: SocketAddr,
    /// Listen address for the operator HTTP API.
    #[arg(long, default_value = "127.0.0.1:8080")]
    api: SocketAddr,
    /// Capture store root.
    #[arg(long, default_value = "captures")]
    captures: PathBuf,
    /// JSON file with coordinator settings (rig shape, deadlines).
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load(path: Option<&PathBuf>) -> Result<CoordinatorConfig, String> {
    let Some(p) = path else { return Ok(CoordinatorConfig::default()) };
    let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();
    let coordinator = match load(args.config.as_ref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cfg = ServerConfig { agent_addr: args.agents, api_addr: args.api, captures: args.captures, coordinator };
    let handle = match server::start(cfg).await {
        Ok(h) => h,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let _ = tokio::signal::ctrl_c().await;
    tracing::info!("shutting down");
    handle.shutdown();
    ExitCode::SUCCESS
}
