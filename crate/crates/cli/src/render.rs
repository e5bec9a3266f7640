//! Plain-text views of API responses.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use digitizer_core::coordinator::{NodeState, NodesResponse, SessionView};
use digitizer_core::fleet::{FleetReport, FleetRowOutcome};

/// Beam-by-slot grid: one column per beam, one row per slot. Connected nodes
/// show their id, lost ones a trailing `*`, empty positions `-`.
pub fn node_grid(r: &NodesResponse) -> String {
    let mut cells: BTreeMap<(u32, u32), String> = BTreeMap::new();
    for n in &r.nodes {
        let mark = if n.state == NodeState::Lost { "*" } else { "" };
        cells.insert((n.beam, n.slot), format!("{}{mark}", n.node_id));
    }
    let width = cells.values().map(|c| c.len()).max().unwrap_or(1).max(3);
    let mut out = String::new();
    let _ = write!(out, "{:>6}", "");
    for beam in 0..r.beams {
        let _ = write!(out, " {beam:>width$}");
    }
    out.push('\n');
    for slot in 0..r.cameras_per_beam {
        let _ = write!(out, "slot {slot}");
        for beam in 0..r.beams {
            let cell = cells.get(&(beam, slot)).map_or("-", String::as_str);
            let _ = write!(out, " {cell:>width$}");
        }
        out.push('\n');
    }
    let lost = r.nodes.iter().filter(|n| n.state == NodeState::Lost).count();
    let _ = writeln!(out, "{} connected, {lost} lost (*), {} positions", r.connected(), r.beams * r.cameras_per_beam);
    out
}

pub fn session_summary(s: &SessionView) -> String {
    let mut out =
        format!("session {}: {:?}, {}/{} frames", s.session_id, s.state, s.frames_received, s.frames_expected);
    if let Some(r) = &s.report {
        if let Some(t) = r.transfer_secs {
            let _ = write!(out, ", transfer {t:.2} s");
        }
        let _ = write!(out, ", {} bytes\nmanifest: {}", r.total_bytes, r.manifest_path);
        if !r.missing.is_empty() {
            let _ = write!(out, "\nmissing:");
            for m in &r.missing {
                let _ = write!(out, " {}/{}", m.phase, m.node_id);
            }
        }
        for w in &r.warnings {
            let _ = write!(out, "\nwarning: {w}");
        }
    }
    out.push('\n');
    out
}

pub fn fleet_table(r: &FleetReport) -> String {
    let mut out = format!("{:<8} {:<12} {:>5} {:>8}  output\n", "node", "status", "code", "ms");
    for row in &r.rows {
        let (status, code, ms, output) = match &row.outcome {
            FleetRowOutcome::Exited { code, output, duration_ms } => {
                ("exited", code.to_string(), duration_ms.to_string(), output.trim_end().replace('\n', " | "))
            }
            FleetRowOutcome::Timeout => ("timeout", "-".into(), "-".into(), String::new()),
            FleetRowOutcome::Unreachable => ("unreachable", "-".into(), "-".into(), String::new()),
        };
        let _ = writeln!(out, "{:<8} {:<12} {:>5} {:>8}  {output}", row.node_id, status, code, ms);
    }
    let _ = writeln!(
        out,
        "job {}: {} rows, {} failed, peak concurrency {} (limit {})",
        r.job_id,
        r.rows.len(),
        r.failures(),
        r.peak_concurrency,
        r.concurrency_limit
    );
    out
}

/// Aligned two-column table.
pub fn pairs(rows: &[(&str, String)]) -> String {
    let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use digitizer_core::coordinator::NodeRecord;
    use digitizer_core::Timestamp;

    #[test]
    fn grid_marks_lost_and_empty_positions() {
        let rec = |id: &str, beam, slot, state| NodeRecord {
            node_id: id.into(),
            beam,
            slot,
            state,
            last_heartbeat: Timestamp::ZERO,
            frames_delivered: 0,
            conn: None,
        };
        let r = NodesResponse {
            beams: 2,
            cameras_per_beam: 2,
            nodes: vec![rec("n01", 0, 0, NodeState::Connected), rec("n04", 1, 1, NodeState::Lost)],
        };
        let g = node_grid(&r);
        let lines: Vec<&str> = g.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("slot 0") && lines[1].contains("n01") && lines[1].trim_end().ends_with('-'));
        assert!(lines[2].contains("n04*"));
        assert!(lines[3].starts_with("1 connected, 1 lost"));
    }

    #[test]
    fn pairs_align() {
        let t = pairs(&[("a", "1".into()), ("long key", "2".into())]);
        assert_eq!(t, "a         1\nlong key  2\n");
    }
}
