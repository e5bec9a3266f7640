//! Argument parsing and verb dispatch for the `digitizer` command.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use digitizer_core::coordinator::{SessionState, StartSession};
use digitizer_core::fleet::{FleetJob, NodeSelector};
use digitizer_core::lighting::{DEFAULT_PATTERN_HEIGHT, DEFAULT_PATTERN_WIDTH};
use digitizer_core::planner::{
    beam_positions, end_voltage, max_wire_length, transfer_time_window, PlanError, PowerBudget, RigPlan, TransferModel,
    WireSpec, DEFAULT_RESISTIVITY,
};
use digitizer_core::sim::{run_cluster, ClusterSpec, Scenario, SimError};
use digitizer_core::{LightLevel, PatternSpec, SessionId};
use serde::Serialize;
use serde_json::json;

use crate::client::{self, ClientError, Operator, COORDINATOR_ENV, DEFAULT_COORDINATOR};
use crate::render;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const UNREACHABLE: i32 = 3;
    pub const PARTIAL: i32 = 4;
    pub const API: i32 = 5;
}

#[derive(Debug, Parser)]
#[command(name = "digitizer", version, about = "Operate the body-scanner capture rig")]
pub struct Cli {
    /// Coordinator address: http://host:port, or sim://<nodes> for an
    /// in-process simulated cluster (e.g. sim://96?seed=7).
    #[arg(long, global = true, env = COORDINATOR_ENV, default_value = DEFAULT_COORDINATOR)]
    pub coordinator: String,
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Show registered nodes as a beam by slot grid.
    Status(StatusArgs),
    /// Run one texture plus pattern capture session and wait for it.
    Capture(CaptureArgs),
    /// Set LED brightness on every beam.
    Light {
        /// Brightness in percent.
        #[arg(value_parser = ["0", "50", "100"])]
        level: String,
    },
    /// Show a pattern on every projector.
    Pattern {
        #[command(subcommand)]
        kind: PatternVerb,
    },
    /// Run maintenance commands across nodes.
    Fleet {
        #[command(subcommand)]
        action: FleetVerb,
    },
    /// Rig planning calculators (local, no coordinator needed).
    Plan {
        #[command(subcommand)]
        calc: PlanVerb,
    },
    /// Deterministic cluster simulator.
    Sim {
        #[command(subcommand)]
        action: SimVerb,
    },
}

#[derive(Debug, Args)]
pub struct StatusArgs {
    /// Show one session instead of the node grid.
    #[arg(long)]
    pub session: Option<String>,
    /// Stream coordinator events as JSON lines.
    #[arg(long, conflicts_with = "session")]
    pub watch: bool,
    /// Stop watching after this many events.
    #[arg(long, requires = "watch")]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CaptureArgs {
    /// Random-dot pattern seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of lit pattern pixels.
    #[arg(long, default_value_t = 0.5)]
    pub density: f64,
    /// LED brightness in percent.
    #[arg(long, default_value = "100", value_parser = ["0", "50", "100"])]
    pub light: String,
    #[arg(long, default_value_t = DEFAULT_PATTERN_WIDTH)]
    pub width: u32,
    #[arg(long, default_value_t = DEFAULT_PATTERN_HEIGHT)]
    pub height: u32,
    /// Return right after the session starts.
    #[arg(long)]
    pub no_wait: bool,
    /// Seconds to wait for the session to finish.
    #[arg(long, default_value_t = 120.0)]
    pub timeout: f64,
}

#[derive(Debug, Subcommand)]
pub enum PatternVerb {
    /// Seeded random-dot pattern.
    Dots {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        density: f64,
        #[arg(long, default_value_t = DEFAULT_PATTERN_WIDTH)]
        width: u32,
        #[arg(long, default_value_t = DEFAULT_PATTERN_HEIGHT)]
        height: u32,
    },
    /// All-black frame.
    Black {
        #[arg(long, default_value_t = DEFAULT_PATTERN_WIDTH)]
        width: u32,
        #[arg(long, default_value_t = DEFAULT_PATTERN_HEIGHT)]
        height: u32,
    },
}

#[derive(Debug, Subcommand)]
pub enum FleetVerb {
    /// Run a command on the selected nodes.
    Run {
        /// `all`, `beams:3-5`, `beam:4`, or a comma-separated node list.
        #[arg(long, default_value = "all")]
        targets: NodeSelector,
        /// Maximum simultaneous executions.
        #[arg(long, default_value_t = digitizer_core::fleet::DEFAULT_CONCURRENCY)]
        limit: usize,
        /// Per-node timeout in seconds.
        #[arg(long, default_value_t = 30.0)]
        timeout: f64,
        /// Write the report as JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Return right after the job starts.
        #[arg(long)]
        no_wait: bool,
        /// Command line, passed to the agents verbatim.
        #[arg(last = true, required = true, num_args = 1..)]
        command: Vec<String>,
    },
    /// Show a job report.
    Show { job_id: u64 },
}

#[derive(Debug, Subcommand)]
pub enum PlanVerb {
    /// Voltage at the end of a supply run.
    Voltage(WireArgs),
    /// Longest supply run that keeps the load above a voltage floor.
    MaxLength {
        #[command(flatten)]
        wire: WireArgs,
        /// Minimum operating voltage of the load.
        #[arg(long, default_value_t = 4.75)]
        min_voltage: f64,
    },
    /// Beam placement and minimum camera angle.
    Beams {
        #[arg(long, default_value_t = 2.90)]
        width: f64,
        #[arg(long, default_value_t = 2.51)]
        depth: f64,
        #[arg(long, default_value_t = 2.10)]
        height: f64,
        #[arg(long, default_value_t = 24)]
        beams: usize,
        #[arg(long, default_value_t = 4)]
        cameras_per_beam: usize,
        /// Beam slots left open at the back for the entrance.
        #[arg(long, default_value_t = 0)]
        gap: usize,
        /// Minimum acceptable angle in degrees.
        #[arg(long, default_value_t = 13.0)]
        threshold: f64,
    },
    /// Time window for moving one capture set to the coordinator.
    Transfer {
        #[arg(long, default_value_t = 96)]
        nodes: u32,
        #[arg(long, default_value_t = 2)]
        images: u32,
        #[arg(long, default_value_t = 2.0e6)]
        bytes_per_image: f64,
        /// Coordinator NIC, bytes/second.
        #[arg(long, default_value_t = 125.0e6)]
        nic: f64,
        /// Staging read rate, bytes/second.
        #[arg(long, default_value_t = 15.0e6)]
        sd_read: f64,
        /// Fixed per-session overhead, seconds.
        #[arg(long, default_value_t = 0.5)]
        overhead: f64,
    },
}

#[derive(Debug, Args)]
pub struct WireArgs {
    /// One-way run length, meters.
    #[arg(long, default_value_t = 0.8)]
    pub length: f64,
    /// Conductor cross-section, mm².
    #[arg(long, default_value_t = 0.27)]
    pub area: f64,
    /// Load current, amperes.
    #[arg(long, default_value_t = 1.25)]
    pub current: f64,
    /// Supply voltage, volts.
    #[arg(long, default_value_t = 5.0)]
    pub supply: f64,
    /// Conductor resistivity, ohm meters.
    #[arg(long, default_value_t = DEFAULT_RESISTIVITY)]
    pub resistivity: f64,
}

impl WireArgs {
    fn spec(&self) -> WireSpec {
        WireSpec {
            length: self.length,
            cross_section: self.area,
            current: self.current,
            supply_voltage: self.supply,
            resistivity: self.resistivity,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum SimVerb {
    /// Run a scenario on a simulated cluster and write the report.
    Run {
        /// Cluster spec JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Scenario JSON: a list of timed operator actions.
        #[arg(long)]
        scenario: PathBuf,
        /// Report JSON destination.
        #[arg(long)]
        out: PathBuf,
        /// Capture-set directory; a temporary one is used when absent.
        #[arg(long)]
        captures: Option<PathBuf>,
        /// Also write the event log as JSON lines.
        #[arg(long)]
        events: Option<PathBuf>,
    },
}

/// A failed verb: exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: String,
    pub message: String,
}

impl Failure {
    fn new(code: i32, kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self { code, kind: kind.into(), message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(exit::USAGE, "usage", message)
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match &e {
            ClientError::Unreachable { .. } => Failure::new(exit::UNREACHABLE, "unreachable", e.to_string()),
            ClientError::BadAddress(_) => Failure::usage(e.to_string()),
            ClientError::Api(api) => {
                let kind = serde_json::to_value(api.kind).ok().and_then(|v| v.as_str().map(str::to_string));
                Failure::new(exit::API, kind.unwrap_or_else(|| "api".into()), e.to_string())
            }
            ClientError::Protocol(_) => Failure::new(exit::API, "protocol", e.to_string()),
        }
    }
}

impl From<PlanError> for Failure {
    fn from(e: PlanError) -> Self {
        Failure::usage(e.to_string())
    }
}

/// What a verb produced: JSON for `--json`, text otherwise, and the exit code.
struct Output {
    json: serde_json::Value,
    text: String,
    code: i32,
}

impl Output {
    fn new<T: Serialize>(value: &T, text: String) -> Self {
        Self { json: serde_json::to_value(value).expect("responses serialize"), text, code: exit::OK }
    }

    fn with_code(mut self, code: i32) -> Self {
        self.code = code;
        self
    }
}

/// Parses `argv` and runs the verb. Returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let rendered = e.render().to_string();
            let _ = if code == exit::OK { write!(out, "{rendered}") } else { write!(err, "{rendered}") };
            return code;
        }
    };
    let json = cli.json;
    match dispatch(cli, out) {
        Ok(o) => {
            if json {
                let _ = writeln!(out, "{}", serde_json::to_string_pretty(&o.json).expect("json value serializes"));
            } else {
                let _ = write!(out, "{}", o.text);
            }
            o.code
        }
        Err(f) => {
            if json {
                let body = json!({ "error": { "kind": f.kind, "message": f.message }, "exit_code": f.code });
                let _ = writeln!(out, "{}", serde_json::to_string_pretty(&body).expect("json value serializes"));
            }
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn level(s: &str) -> Result<LightLevel, Failure> {
    let v: u8 = s.parse().map_err(|_| Failure::usage(format!("light level must be one of 0, 50, 100 (got {s})")))?;
    LightLevel::try_from(v).map_err(|e| Failure::usage(e.to_string()))
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<Output, Failure> {
    match cli.verb {
        Verb::Plan { calc } => plan(calc),
        Verb::Sim { action } => sim(action),
        verb => {
            let mut op = client::connect(&cli.coordinator)?;
            online(verb, op.as_mut(), cli.json, out)
        }
    }
}

fn online(verb: Verb, op: &mut dyn Operator, json: bool, out: &mut dyn Write) -> Result<Output, Failure> {
    match verb {
        Verb::Status(a) => {
            if let Some(id) = a.session {
                let s = op.session(&SessionId::new(id))?;
                return Ok(Output::new(&s, render::session_summary(&s)));
            }
            if a.watch {
                let mut seen = 0usize;
                let limit = a.count.unwrap_or(usize::MAX);
                let mut events = Vec::new();
                op.events(&mut |ev| {
                    let line = serde_json::to_string(&ev).expect("events serialize");
                    if !json {
                        let _ = writeln!(out, "{line}");
                        let _ = out.flush();
                    }
                    events.push(ev);
                    seen += 1;
                    seen < limit
                })?;
                return Ok(Output::new(&events, String::new()));
            }
            let nodes = op.nodes()?;
            Ok(Output::new(&nodes, render::node_grid(&nodes)))
        }
        Verb::Capture(a) => capture(op, a),
        Verb::Light { level: l } => {
            let r = op.set_lights(level(&l)?)?;
            Ok(Output::new(&r, format!("lights at {}%, sent to {} nodes\n", r.level.percent(), r.targets)))
        }
        Verb::Pattern { kind } => {
            let spec = match kind {
                PatternVerb::Dots { seed, density, width, height } => {
                    PatternSpec::random_dot(seed, density, width, height)
                }
                PatternVerb::Black { width, height } => PatternSpec::black(width, height),
            };
            spec.validate().map_err(|e| Failure::usage(e.to_string()))?;
            let r = op.set_pattern(spec)?;
            Ok(Output::new(
                &r,
                format!("{:?} pattern (seed {}) sent to {} nodes\n", r.pattern.kind, r.pattern.seed, r.targets),
            ))
        }
        Verb::Fleet { action } => fleet(op, action),
        Verb::Plan { .. } | Verb::Sim { .. } => unreachable!("handled offline"),
    }
}

fn capture(op: &mut dyn Operator, a: CaptureArgs) -> Result<Output, Failure> {
    let pattern = PatternSpec::random_dot(a.seed, a.density, a.width, a.height);
    pattern.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let started = op.start_session(&StartSession { pattern, light: level(&a.light)? })?;
    if a.no_wait {
        return Ok(Output::new(&started, format!("session {} started\n", started.session_id)));
    }
    let s = poll(op, a.timeout, |op| {
        let s = op.session(&started.session_id)?;
        Ok(s.is_terminal().then_some(s))
    })?
    .ok_or_else(|| {
        Failure::new(
            exit::PARTIAL,
            "timeout",
            format!("session {} still running after {} s", started.session_id, a.timeout),
        )
    })?;
    let code = if s.state == SessionState::Complete { exit::OK } else { exit::PARTIAL };
    Ok(Output::new(&s, render::session_summary(&s)).with_code(code))
}

/// Calls `f` until it yields a value or `timeout_secs` of (possibly virtual)
/// time have passed.
fn poll<T>(
    op: &mut dyn Operator,
    timeout_secs: f64,
    mut f: impl FnMut(&mut dyn Operator) -> Result<Option<T>, ClientError>,
) -> Result<Option<T>, Failure> {
    let step = Duration::from_millis(250);
    let budget = Duration::from_secs_f64(timeout_secs.max(0.0));
    let mut waited = Duration::ZERO;
    let wall = Instant::now();
    loop {
        if let Some(v) = f(op)? {
            return Ok(Some(v));
        }
        if waited >= budget || wall.elapsed() >= budget + Duration::from_secs(5) {
            return Ok(None);
        }
        op.pause(step);
        waited += step;
    }
}

fn fleet(op: &mut dyn Operator, action: FleetVerb) -> Result<Output, Failure> {
    let report = match action {
        FleetVerb::Show { job_id } => op.fleet_job(job_id)?,
        FleetVerb::Run { targets, limit, timeout, out, no_wait, command } => {
            if limit == 0 {
                return Err(Failure::usage("--limit must be at least 1"));
            }
            let job = FleetJob {
                targets,
                command: command.join(" "),
                concurrency_limit: limit,
                per_node_timeout: Duration::from_secs_f64(timeout.max(0.0)),
            };
            let started = op.start_fleet(&job)?;
            let report = if no_wait || started.done {
                started
            } else {
                // every wave of `limit` nodes may run into the per-node timeout
                let nodes = op.nodes()?.nodes.len().max(1);
                let budget = timeout * (nodes.div_ceil(limit) as f64 + 1.0);
                poll(op, budget, |op| {
                    let r = op.fleet_job(started.job_id)?;
                    Ok(r.done.then_some(r))
                })?
                .ok_or_else(|| {
                    Failure::new(exit::PARTIAL, "timeout", format!("fleet job {} did not finish", started.job_id))
                })?
            };
            if let Some(path) = out {
                let body = serde_json::to_vec_pretty(&report).expect("reports serialize");
                std::fs::write(&path, body)
                    .map_err(|e| Failure::new(exit::API, "io", format!("{}: {e}", path.display())))?;
            }
            report
        }
    };
    let code = if report.done && report.failures() == 0 {
        exit::OK
    } else if report.done {
        exit::PARTIAL
    } else {
        exit::OK
    };
    Ok(Output::new(&report, render::fleet_table(&report)).with_code(code))
}

fn plan(calc: PlanVerb) -> Result<Output, Failure> {
    match calc {
        PlanVerb::Voltage(w) => {
            let spec = w.spec();
            spec.validate()?;
            let v = end_voltage(&spec);
            let drop = spec.supply_voltage - v;
            let text = render::pairs(&[
                ("end voltage", format!("{v:.4} V")),
                ("drop", format!("{drop:.4} V")),
                ("loop resistance", format!("{:.6} ohm", spec.loop_resistance())),
            ]);
            Ok(Output::new(&json!({ "wire": spec, "end_voltage": v, "drop": drop }), text))
        }
        PlanVerb::MaxLength { wire, min_voltage } => {
            let spec = wire.spec();
            let budget = PowerBudget { min_operating_voltage: min_voltage, ..PowerBudget::default() };
            let l = max_wire_length(&spec, &budget)?;
            let text = render::pairs(&[
                ("max length", format!("{l:.4} m")),
                ("end voltage at max", format!("{:.6} V", end_voltage(&spec.with_length(l)))),
            ]);
            Ok(Output::new(&json!({ "wire": spec, "budget": budget, "max_length": l }), text))
        }
        PlanVerb::Beams { width, depth, height, beams, cameras_per_beam, gap, threshold } => {
            let rig = RigPlan {
                width,
                depth,
                height,
                beams,
                cameras_per_beam,
                min_angle_threshold: threshold,
                entrance_gap_slots: gap,
            };
            rig.validate()?;
            let points = beam_positions(&rig);
            let min = rig.min_camera_angle()?;
            let mut text = format!("{:>4} {:>8} {:>8} {:>9}\n", "beam", "x (m)", "y (m)", "bearing");
            // float residue on the axes would print as -0.000 and flip bearings to -180
            let snap = |v: f64| if v.abs() < 1e-9 { 0.0 } else { v };
            for (i, p) in points.iter().enumerate() {
                let (x, y) = (snap(p.x), snap(p.y));
                let bearing = y.atan2(x).to_degrees();
                text.push_str(&format!("{i:>4} {x:>8.3} {y:>8.3} {bearing:>9.2}\n"));
            }
            let ok = min >= threshold;
            text.push_str(&render::pairs(&[
                ("beams mounted", rig.mounted_beams().to_string()),
                ("cameras", rig.camera_count().to_string()),
                ("beam spacing", format!("{:.4} m", rig.beam_spacing())),
                ("min adjacent angle", format!("{min:.2} deg")),
                ("threshold", format!("{threshold:.2} deg ({})", if ok { "met" } else { "NOT met" })),
            ]));
            let body = json!({ "rig": rig, "positions": points, "min_angle": min, "threshold_met": ok });
            Ok(Output::new(&body, text))
        }
        PlanVerb::Transfer { nodes, images, bytes_per_image, nic, sd_read, overhead } => {
            let model = TransferModel {
                node_count: nodes,
                images_per_node: images,
                bytes_per_image,
                nic_bandwidth: nic,
                sd_read_rate: sd_read,
                fixed_overhead: overhead,
            };
            for (name, v) in [("bytes-per-image", bytes_per_image), ("nic", nic), ("sd-read", sd_read)] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Failure::usage(format!("--{name} must be positive")));
                }
            }
            let w = transfer_time_window(&model);
            let text = render::pairs(&[
                ("total bytes", format!("{:.0}", model.total_bytes())),
                ("lower bound", format!("{:.3} s", w.lower)),
                ("upper bound", format!("{:.3} s", w.upper)),
            ]);
            Ok(Output::new(&json!({ "model": model, "window": w }), text))
        }
    }
}

fn sim(action: SimVerb) -> Result<Output, Failure> {
    let SimVerb::Run { spec, scenario, out, captures, events } = action;
    let read = |p: &PathBuf| std::fs::read(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())));
    let spec: ClusterSpec = match &spec {
        Some(p) => serde_json::from_slice(&read(p)?).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
        None => ClusterSpec::default(),
    };
    let steps: Scenario = serde_json::from_slice(&read(&scenario)?)
        .map_err(|e| Failure::usage(format!("{}: {e}", scenario.display())))?;
    let scratch;
    let keep = captures.is_some();
    let dir = match captures {
        Some(d) => d,
        None => {
            scratch = tempfile::tempdir().map_err(|e| Failure::new(exit::API, "io", e.to_string()))?;
            scratch.path().to_path_buf()
        }
    };
    let report = run_cluster(spec, &steps, &dir).map_err(|e| match e {
        SimError::InvalidSpec(_) | SimError::UnknownNode(_) => Failure::usage(e.to_string()),
        SimError::VirtualTimeExhausted { .. } => Failure::new(exit::PARTIAL, "time_cap", e.to_string()),
        SimError::Store(_) => Failure::new(exit::API, "io", e.to_string()),
    })?;
    let io = |p: &PathBuf, e: std::io::Error| Failure::new(exit::API, "io", format!("{}: {e}", p.display()));
    std::fs::write(&out, serde_json::to_vec_pretty(&report).expect("reports serialize")).map_err(|e| io(&out, e))?;
    if let Some(p) = &events {
        std::fs::write(p, report.event_log_jsonl()).map_err(|e| io(p, e))?;
    }
    let mut text = format!("virtual duration {:.3} s, {} events\n", report.virtual_duration, report.events.len());
    for s in &report.sessions {
        text.push_str(&render::session_summary(s));
    }
    for j in &report.fleet_jobs {
        text.push_str(&format!("fleet job {}: {} rows, {} failed\n", j.job_id, j.rows.len(), j.failures()));
    }
    for w in &report.warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    if !keep {
        text.push_str("capture set discarded; pass --captures to keep it\n");
    }
    text.push_str(&format!("report written to {}\n", out.display()));
    let partial = report.sessions.iter().any(|s| s.state != SessionState::Complete)
        || report.fleet_jobs.iter().any(|j| j.failures() > 0);
    let summary = json!({
        "report": out,
        "virtual_duration": report.virtual_duration,
        "sessions": report.sessions,
        "fleet_jobs": report.fleet_jobs,
        "delivered": report.total_delivered(),
        "warnings": report.warnings,
    });
    Ok(Output::new(&summary, text).with_code(if partial { exit::PARTIAL } else { exit::OK }))
}
