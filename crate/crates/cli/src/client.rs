//! Operator API clients: HTTP against a running coordinator, or an
//! in-process simulated cluster addressed as `sim://<nodes>`.

use std::io::{BufRead, BufReader};
use std::time::Duration;

use digitizer_core::coordinator::{
    ApiError, ApiErrorKind, CoordEvent, LightsRequest, LightsResponse, NodesResponse, PatternRequest, PatternResponse,
    SessionView, StartSession,
};
use digitizer_core::fleet::{FleetJob, FleetReport};
use digitizer_core::sim::{ClusterSpec, SimEvent, Simulation};
use digitizer_core::{LightLevel, PatternSpec, SessionId};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub const COORDINATOR_ENV: &str = "DIGITIZER_COORDINATOR";
pub const DEFAULT_COORDINATOR: &str = "http://127.0.0.1:8080";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("coordinator unreachable at {addr}: {reason}")]
    Unreachable { addr: String, reason: String },
    #[error("{}", .0.message)]
    Api(ApiError),
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("invalid coordinator address {0:?}")]
    BadAddress(String),
}

/// Every operator capability, independent of transport.
pub trait Operator {
    fn nodes(&mut self) -> Result<NodesResponse, ClientError>;
    fn start_session(&mut self, req: &StartSession) -> Result<SessionView, ClientError>;
    fn session(&mut self, id: &SessionId) -> Result<SessionView, ClientError>;
    fn set_lights(&mut self, level: LightLevel) -> Result<LightsResponse, ClientError>;
    fn set_pattern(&mut self, pattern: PatternSpec) -> Result<PatternResponse, ClientError>;
    fn start_fleet(&mut self, job: &FleetJob) -> Result<FleetReport, ClientError>;
    fn fleet_job(&mut self, id: u64) -> Result<FleetReport, ClientError>;
    /// Feeds events to `sink` until it returns false or the stream ends.
    fn events(&mut self, sink: &mut dyn FnMut(CoordEvent) -> bool) -> Result<(), ClientError>;
    /// Lets `d` pass between polls.
    fn pause(&mut self, d: Duration);
}

/// Picks the transport from the address scheme.
pub fn connect(addr: &str) -> Result<Box<dyn Operator>, ClientError> {
    if let Some(rest) = addr.strip_prefix("sim://") {
        return Ok(Box::new(SimClient::from_address(rest)?));
    }
    if addr.starts_with("http://") {
        return Ok(Box::new(HttpClient::new(addr)));
    }
    Err(ClientError::BadAddress(addr.to_string()))
}

pub struct HttpClient {
    base: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(base: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_connect(Some(Duration::from_secs(3)))
            .build()
            .into();
        Self { base: base.trim_end_matches('/').to_string(), agent }
    }

    fn unreachable(&self, e: ureq::Error) -> ClientError {
        ClientError::Unreachable { addr: self.base.clone(), reason: e.to_string() }
    }

    fn finish<T: DeserializeOwned>(
        &self,
        resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<T, ClientError> {
        let mut resp = resp.map_err(|e| self.unreachable(e))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| ClientError::Protocol(e.to_string()))?;
        if status >= 400 {
            let err = serde_json::from_str::<ApiError>(&text).unwrap_or_else(|_| {
                let kind = if status == 404 { ApiErrorKind::NotFound } else { ApiErrorKind::BadRequest };
                ApiError::new(kind, format!("HTTP {status}: {}", text.trim()))
            });
            return Err(ClientError::Api(err));
        }
        serde_json::from_str(&text).map_err(|e| ClientError::Protocol(format!("{e} in {text:?}")))
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        self.finish(self.agent.get(format!("{}{path}", self.base)).call())
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        self.finish(self.agent.post(format!("{}{path}", self.base)).send_json(body))
    }
}

impl Operator for HttpClient {
    fn nodes(&mut self) -> Result<NodesResponse, ClientError> {
        self.get("/nodes")
    }

    fn start_session(&mut self, req: &StartSession) -> Result<SessionView, ClientError> {
        self.post("/sessions", req)
    }

    fn session(&mut self, id: &SessionId) -> Result<SessionView, ClientError> {
        self.get(&format!("/sessions/{id}"))
    }

    fn set_lights(&mut self, level: LightLevel) -> Result<LightsResponse, ClientError> {
        self.post("/lights", &LightsRequest { level })
    }

    fn set_pattern(&mut self, pattern: PatternSpec) -> Result<PatternResponse, ClientError> {
        self.post("/pattern", &PatternRequest { pattern })
    }

    fn start_fleet(&mut self, job: &FleetJob) -> Result<FleetReport, ClientError> {
        self.post("/fleet", job)
    }

    fn fleet_job(&mut self, id: u64) -> Result<FleetReport, ClientError> {
        self.get(&format!("/fleet/{id}"))
    }

    fn events(&mut self, sink: &mut dyn FnMut(CoordEvent) -> bool) -> Result<(), ClientError> {
        let resp = self.agent.get(format!("{}/events", self.base)).call().map_err(|e| self.unreachable(e))?;
        if resp.status().as_u16() >= 400 {
            return Err(ClientError::Protocol(format!("event stream returned HTTP {}", resp.status())));
        }
        let reader = BufReader::new(resp.into_body().into_reader());
        for line in reader.lines() {
            let line = line.map_err(|e| ClientError::Protocol(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let ev: CoordEvent = serde_json::from_str(&line).map_err(|e| ClientError::Protocol(e.to_string()))?;
            if !sink(ev) {
                break;
            }
        }
        Ok(())
    }

    fn pause(&mut self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// In-process simulated cluster. Address form: `sim://96` or
/// `sim://96?seed=7&captures=/tmp/caps`. Without `captures` the frames go to a
/// temporary directory removed on drop.
pub struct SimClient {
    sim: Simulation,
    _scratch: Option<tempfile::TempDir>,
    events_seen: usize,
}

impl SimClient {
    pub fn from_address(rest: &str) -> Result<Self, ClientError> {
        let bad = || ClientError::BadAddress(format!("sim://{rest}"));
        let (count, query) = rest.split_once('?').unwrap_or((rest, ""));
        let mut spec = ClusterSpec { node_count: count.parse().map_err(|_| bad())?, ..ClusterSpec::default() };
        let mut captures = None;
        for pair in query.split('&').filter(|p| !p.is_empty()) {
            let (k, v) = pair.split_once('=').ok_or_else(bad)?;
            match k {
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                "captures" => captures = Some(std::path::PathBuf::from(v)),
                "width" => spec.frame_width = v.parse().map_err(|_| bad())?,
                "height" => spec.frame_height = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        let (dir, scratch) = match captures {
            Some(d) => (d, None),
            None => {
                let t = tempfile::tempdir().map_err(|e| ClientError::Protocol(e.to_string()))?;
                (t.path().to_path_buf(), Some(t))
            }
        };
        let mut sim = Simulation::new(spec, &dir).map_err(sim_err)?;
        sim.boot().map_err(sim_err)?;
        Ok(Self { sim, _scratch: scratch, events_seen: 0 })
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }
}

fn sim_err(e: digitizer_core::sim::SimError) -> ClientError {
    ClientError::Api(ApiError::new(ApiErrorKind::Internal, e.to_string()))
}

fn found<T>(v: Option<T>, what: String) -> Result<T, ClientError> {
    v.ok_or_else(|| ClientError::Api(ApiError::new(ApiErrorKind::NotFound, format!("{what} not found"))))
}

impl Operator for SimClient {
    fn nodes(&mut self) -> Result<NodesResponse, ClientError> {
        Ok(self.sim.nodes())
    }

    fn start_session(&mut self, req: &StartSession) -> Result<SessionView, ClientError> {
        self.sim.start_session(req.clone()).map_err(ClientError::Api)
    }

    fn session(&mut self, id: &SessionId) -> Result<SessionView, ClientError> {
        found(self.sim.session(id), format!("session {id}"))
    }

    fn set_lights(&mut self, level: LightLevel) -> Result<LightsResponse, ClientError> {
        Ok(self.sim.set_lights(level))
    }

    fn set_pattern(&mut self, pattern: PatternSpec) -> Result<PatternResponse, ClientError> {
        self.sim.set_pattern(pattern).map_err(ClientError::Api)
    }

    fn start_fleet(&mut self, job: &FleetJob) -> Result<FleetReport, ClientError> {
        self.sim.start_fleet(job.clone()).map_err(ClientError::Api)
    }

    fn fleet_job(&mut self, id: u64) -> Result<FleetReport, ClientError> {
        found(self.sim.fleet_job(id), format!("fleet job {id}"))
    }

    /// Replays events not yet seen, running the cluster to quiescence first.
    fn events(&mut self, sink: &mut dyn FnMut(CoordEvent) -> bool) -> Result<(), ClientError> {
        self.sim.run_to_quiescence().map_err(sim_err)?;
        let log = self.sim.events();
        for entry in &log[self.events_seen..] {
            self.events_seen += 1;
            if let SimEvent::Coordinator(kind) = &entry.event {
                if !sink(CoordEvent { at: entry.at, kind: kind.clone() }) {
                    break;
                }
            }
        }
        Ok(())
    }

    fn pause(&mut self, d: Duration) {
        let until = self.sim.now() + d;
        // a time-cap error surfaces on the next poll as a stuck session
        let _ = self.sim.run_until(until);
    }
}
