//! Node agent daemon: one per camera node.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use digitizer_cli::node::{run_node, NodeOptions};
use digitizer_core::agent::{AgentConfig, CaptureBackend, CommandCamera, EchoBackend, MockCamera, ShellBackend};
use digitizer_core::lighting::{MockLightController, MockProjector};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Camera {
    Mock,
    Raspistill,
}

#[derive(Debug, Parser)]
#[command(name = "digitizer-agent", version, about = "Capture rig node agent")]
struct Args {
    /// Node name, e.g. n07.
    #[arg(long)]
    node_id: String,
    /// Beam index from 0.
    #[arg(long)]
    beam: u32,
    /// Camera position on the beam, from 0 at the bottom.
    #[arg(long)]
    slot: u32,
    /// Coordinator agent endpoint, host:port.
    #[arg(long)]
    coordinator: Option<String>,
    #[arg(long, value_enum, default_value = "mock")]
    camera: Camera,
    /// Where the capture program writes stills before they are read back.
    #[arg(long, default_value = "/tmp")]
    scratch_dir: PathBuf,
    /// Run fleet commands through `sh -c` instead of echoing them.
    #[arg(long)]
    shell: bool,
    /// Still width in pixels.
    #[arg(long)]
    width: Option<u32>,
    /// Still height in pixels.
    #[arg(long)]
    height: Option<u32>,
    /// JSON file with agent settings; flags above override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn config(args: &Args) -> Result<AgentConfig, String> {
    let mut cfg: AgentConfig = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => AgentConfig::default(),
    };
    cfg.node_id = args.node_id.as_str().into();
    cfg.beam = args.beam;
    cfg.slot = args.slot;
    if let Some(c) = &args.coordinator {
        cfg.coordinator_addr = c.clone();
    }
    if let Some(w) = args.width {
        cfg.frame_width = w;
    }
    if let Some(h) = args.height {
        cfg.frame_height = h;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();
    let cfg = match config(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let camera: Box<dyn CaptureBackend> = match args.camera {
        Camera::Mock => Box::new(MockCamera::default()),
        Camera::Raspistill => Box::new(CommandCamera::raspistill(&args.scratch_dir)),
    };
    let shell: Box<dyn digitizer_core::agent::CommandBackend> =
        if args.shell { Box::new(ShellBackend) } else { Box::new(EchoBackend::default()) };
    // slot 0 of each beam drives the beam's light bar and projector
    let (lights, projector) = if cfg.slot == 0 {
        (Some(Box::new(MockLightController::new(cfg.beam)) as _), Some(Box::new(MockProjector::default()) as _))
    } else {
        (None, None)
    };
    let opts = NodeOptions { config: cfg, camera, shell, lights, projector, connect_timeout: Duration::from_secs(3) };
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    match run_node(opts, shutdown).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
