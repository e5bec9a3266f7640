//! Node agent daemon: drives one [`Agent`] over a real TCP connection with
//! blocking hardware backends on the tokio blocking pool.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use digitizer_core::agent::{
    capture_frame, Agent, AgentConfig, AgentOutput, CaptureBackend, CaptureError, CommandBackend, CommandRun,
    ConfigError,
};
use digitizer_core::lighting::{LightController, Projector};
use digitizer_core::protocol::{encode_message, CaptureCommand, FrameMetadata, FrameReader, Message};
use digitizer_core::Timestamp;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;
use tokio::sync::mpsc;

pub struct NodeOptions {
    pub config: AgentConfig,
    pub camera: Box<dyn CaptureBackend>,
    pub shell: Box<dyn CommandBackend>,
    pub lights: Option<Box<dyn LightController>>,
    pub projector: Option<Box<dyn Projector>>,
    pub connect_timeout: Duration,
}

enum Input {
    Connected(u64, TcpStream),
    ConnectFailed(u64),
    Msg(u64, Message),
    Closed(u64),
    Written(u64),
    Captured(CaptureCommand, Result<(FrameMetadata, Vec<u8>), CaptureError>),
    Ran(u64, CommandRun),
}

/// Runs the agent until `shutdown` resolves.
pub async fn run_node(opts: NodeOptions, shutdown: impl std::future::Future<Output = ()>) -> Result<(), ConfigError> {
    let cfg = opts.config;
    let mut agent = Agent::new(cfg.clone())?;
    if let Some(l) = opts.lights {
        agent = agent.with_lights(l);
    }
    if let Some(p) = opts.projector {
        agent = agent.with_projector(p);
    }
    let camera = Arc::new(Mutex::new(opts.camera));
    let shell = Arc::new(Mutex::new(opts.shell));
    let (tx, mut rx) = mpsc::unbounded_channel::<Input>();
    // bumped on every connect attempt and drop, so late inputs from an old
    // socket are recognised and ignored
    let mut epoch = 0u64;
    let mut writer: Option<mpsc::UnboundedSender<Message>> = None;
    let mut unflushed = 0usize;
    agent.start(Timestamp::now_wall(), Duration::ZERO);
    tokio::pin!(shutdown);

    loop {
        while let Some(out) = agent.poll_output() {
            match out {
                AgentOutput::Connect => {
                    epoch += 1;
                    let (tx, addr, e, limit) = (tx.clone(), cfg.coordinator_addr.clone(), epoch, opts.connect_timeout);
                    tokio::spawn(async move {
                        let input = match tokio::time::timeout(limit, TcpStream::connect(&addr)).await {
                            Ok(Ok(s)) => Input::Connected(e, s),
                            _ => Input::ConnectFailed(e),
                        };
                        let _ = tx.send(input);
                    });
                }
                AgentOutput::Send(msg) => {
                    if let Some(w) = &writer {
                        unflushed += 1;
                        let _ = w.send(msg);
                    }
                }
                AgentOutput::Capture { command, received_at } => {
                    let (tx, camera, node, res) =
                        (tx.clone(), camera.clone(), cfg.node_id.clone(), (cfg.frame_width, cfg.frame_height));
                    tokio::task::spawn_blocking(move || {
                        let mut cam = camera.lock().unwrap_or_else(|p| p.into_inner());
                        let r = capture_frame(cam.as_mut(), &node, res, &command, received_at);
                        let _ = tx.send(Input::Captured(command, r));
                    });
                }
                AgentOutput::Execute { job_id, command, timeout } => {
                    let (tx, shell) = (tx.clone(), shell.clone());
                    tokio::task::spawn_blocking(move || {
                        let run = shell.lock().unwrap_or_else(|p| p.into_inner()).run(&command, timeout);
                        let _ = tx.send(Input::Ran(job_id, run));
                    });
                }
                AgentOutput::Log(ev) => {
                    let line = serde_json::to_string(&ev).expect("agent events serialize");
                    tracing::info!(target: "agent", node = %cfg.node_id, "{line}");
                }
            }
        }

        let wait =
            agent.poll_timeout().map_or(Duration::from_secs(3600), |t| t.saturating_since(Timestamp::now_wall()));
        tokio::select! {
            _ = &mut shutdown => return Ok(()),
            _ = tokio::time::sleep(wait) => agent.handle_timeout(Timestamp::now_wall()),
            Some(input) = rx.recv() => {
                let now = Timestamp::now_wall();
                match input {
                    Input::Connected(e, stream) if e == epoch => {
                        let _ = stream.set_nodelay(true);
                        let (rd, wr) = stream.into_split();
                        writer = Some(spawn_writer(wr, e, tx.clone()));
                        tokio::spawn(read_loop(rd, e, tx.clone()));
                        unflushed = 0;
                        agent.on_connected(now);
                    }
                    Input::ConnectFailed(e) if e == epoch => agent.on_connect_failed(now),
                    Input::Msg(e, msg) if e == epoch => agent.on_message(now, msg),
                    Input::Closed(e) if e == epoch => {
                        epoch += 1;
                        writer = None;
                        agent.on_disconnected(now);
                    }
                    Input::Written(e) if e == epoch => {
                        unflushed = unflushed.saturating_sub(1);
                        if unflushed == 0 {
                            agent.on_flushed(now);
                        }
                    }
                    Input::Captured(cmd, r) => agent.on_capture_finished(now, &cmd, r),
                    Input::Ran(job, run) => agent.on_command_finished(now, job, run),
                    _ => {}
                }
            }
        }
    }
}

fn spawn_writer(
    mut wr: OwnedWriteHalf,
    epoch: u64,
    tx: mpsc::UnboundedSender<Input>,
) -> mpsc::UnboundedSender<Message> {
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Message>();
    tokio::spawn(async move {
        while let Some(msg) = out_rx.recv().await {
            let Ok(bytes) = encode_message(&msg) else { continue };
            if wr.write_all(&bytes).await.is_err() {
                let _ = tx.send(Input::Closed(epoch));
                return;
            }
            let _ = tx.send(Input::Written(epoch));
        }
        let _ = wr.shutdown().await;
    });
    out_tx
}

async fn read_loop(mut rd: OwnedReadHalf, epoch: u64, tx: mpsc::UnboundedSender<Input>) {
    let mut reader = FrameReader::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = match rd.read(&mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        reader.push(&buf[..n]);
        loop {
            match reader.next_message() {
                Ok(Some(msg)) => {
                    let _ = tx.send(Input::Msg(epoch, msg));
                }
                Ok(None) => break,
                Err(e) => {
                    tracing::warn!("closing connection: {e}");
                    let _ = tx.send(Input::Closed(epoch));
                    return;
                }
            }
        }
    }
    let _ = tx.send(Input::Closed(epoch));
}
