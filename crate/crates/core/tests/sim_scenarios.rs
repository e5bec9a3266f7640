//! Whole-cluster runs through the public simulator API.

use digitizer_core::agent::AgentEvent;
use digitizer_core::coordinator::{EventKind, SessionState};
use digitizer_core::fleet::{FleetJob, FleetRowOutcome, NodeSelector};
use digitizer_core::sim::{run_cluster, Action, ClusterSpec, FaultKind, FaultSpec, Scenario, SimEvent};
use digitizer_core::LightLevel;

fn spec(n: usize) -> ClusterSpec {
    ClusterSpec { node_count: n, frame_width: 96, frame_height: 64, ..ClusterSpec::default() }
}

#[test]
fn scenario_file_runs_end_to_end() {
    let scenario: Scenario = serde_json::from_str(
        r#"[
            {"at": 0.5, "action": "lights", "level": 50},
            {"at": 1.0, "action": "capture", "seed": 9, "light": 100},
            {"at": 20.0, "action": "capture", "seed": 10, "light": 50},
            {"at": 40.0, "action": "fleet", "job": {"targets": {"select": "beams", "from": 0, "to": 1}, "command": "echo up"}}
        ]"#,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = run_cluster(spec(16), &scenario, dir.path()).unwrap();
    assert_eq!(r.sessions.len(), 2);
    assert!(r.sessions.iter().all(|s| s.state == SessionState::Complete && s.frames_received == 32));
    assert_eq!(r.sessions[1].session_id.as_str(), "s0002");
    assert_eq!(r.fleet_jobs[0].rows.len(), 8);
    assert_eq!(r.total_delivered(), 64);
    // every node acknowledges both half-level commands
    let lit = r
        .events
        .iter()
        .filter(|e| {
            matches!(
                &e.event,
                SimEvent::Agent { event: AgentEvent::LightsApplied { level: LightLevel::Half, ok: true }, .. }
            )
        })
        .count();
    assert_eq!(lit, 16 * 2);
}

#[test]
fn session_ids_continue_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let one = [digitizer_core::sim::ScenarioStep { at: 0.5, action: Action::capture(1, LightLevel::Full) }];
    run_cluster(spec(4), &one, dir.path()).unwrap();
    let r = run_cluster(spec(4), &one, dir.path()).unwrap();
    assert_eq!(r.sessions[0].session_id.as_str(), "s0002");
}

#[test]
fn failing_camera_yields_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ClusterSpec { camera_failures: vec!["n03".into()], ..spec(8) };
    let one = [digitizer_core::sim::ScenarioStep { at: 0.5, action: Action::capture(1, LightLevel::Full) }];
    let r = run_cluster(spec, &one, dir.path()).unwrap();
    let s = &r.sessions[0];
    assert_eq!(s.state, SessionState::PartialFailure);
    let missing = &s.report.as_ref().unwrap().missing;
    assert_eq!(missing.len(), 2);
    assert!(missing.iter().all(|m| m.node_id.as_str() == "n03"));
}

#[test]
fn node_down_during_fleet_job_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ClusterSpec {
        fault_plan: vec![FaultSpec { at: 0.2, node_id: "n02".into(), kind: FaultKind::Crash }],
        ..spec(6)
    };
    let job = FleetJob { concurrency_limit: 2, ..FleetJob::new(NodeSelector::All, "echo x") };
    let r =
        run_cluster(spec, &[digitizer_core::sim::ScenarioStep { at: 5.0, action: Action::Fleet { job } }], dir.path())
            .unwrap();
    let rows = &r.fleet_jobs[0].rows;
    assert_eq!(rows.len(), 6);
    let n02 = rows.iter().find(|r| r.node_id.as_str() == "n02").unwrap();
    assert_eq!(n02.outcome, FleetRowOutcome::Unreachable);
    assert!(r.events.iter().any(
        |e| matches!(&e.event, SimEvent::Coordinator(EventKind::NodeLost { node_id }) if node_id.as_str() == "n02")
    ));
}

#[test]
fn event_log_is_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let one = [digitizer_core::sim::ScenarioStep { at: 0.5, action: Action::capture(1, LightLevel::Full) }];
    let r = run_cluster(spec(4), &one, dir.path()).unwrap();
    let log = r.event_log_jsonl();
    let mut last = 0;
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let at = v["at"].as_u64().unwrap();
        assert!(at >= last, "log is time ordered");
        last = at;
        assert!(v["source"].is_string());
    }
}
