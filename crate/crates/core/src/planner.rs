//! Rig planning calculators: supply-wire voltage drop, beam placement around
//! the frame, and capture-set transfer time.
//!
//! Everything here is a pure function over plain parameter bundles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Copper resistivity in Ω·m used by the wire model.
///
/// Calibrated so that an 0.8 m run of 0.27 mm² at 1.25 A from a 5 V rail ends
/// at 4.8675 V when both the supply and the return conductor are counted.
pub const DEFAULT_RESISTIVITY: f64 = 1.78875e-8;

/// LED stripe figures recorded for documentation; no calculator uses them.
pub const LED_STRIPE_LEDS_PER_METER: u32 = 60;
pub const LED_STRIPE_LUMEN_PER_METER: (u32, u32) = (1000, 1300);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("minimum operating voltage {v_min} V is not below the supply voltage {supply} V")]
    InfeasibleBudget { v_min: f64, supply: f64 },
    #[error("point {index} coincides with the center")]
    DegenerateCenter { index: usize },
    #[error("at least {required} points are required, got {got}")]
    TooFewPoints { required: usize, got: usize },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: &'static str },
}

fn positive(name: &'static str, value: f64) -> Result<(), PlanError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(PlanError::InvalidParameter { name, reason: "must be a finite positive number" })
    }
}

/// One supply run: length in meters, conductor cross-section in mm², load
/// current in amperes, rail voltage in volts, resistivity in Ω·m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireSpec {
    pub length: f64,
    pub cross_section: f64,
    pub current: f64,
    pub supply_voltage: f64,
    #[serde(default = "default_resistivity")]
    pub resistivity: f64,
}

fn default_resistivity() -> f64 {
    DEFAULT_RESISTIVITY
}

impl Default for WireSpec {
    /// The 80 cm CAT5 power run feeding one Raspberry Pi.
    fn default() -> Self {
        Self { length: 0.8, cross_section: 0.27, current: 1.25, supply_voltage: 5.0, resistivity: DEFAULT_RESISTIVITY }
    }
}

impl WireSpec {
    pub fn validate(&self) -> Result<(), PlanError> {
        positive("length", self.length)?;
        positive("cross_section", self.cross_section)?;
        positive("current", self.current)?;
        positive("supply_voltage", self.supply_voltage)?;
        positive("resistivity", self.resistivity)
    }

    pub fn with_length(self, length: f64) -> Self {
        Self { length, ..self }
    }

    /// Loop resistance in ohms (supply plus return conductor).
    pub fn loop_resistance(&self) -> f64 {
        self.resistivity * (2.0 * self.length) / (self.cross_section * 1e-6)
    }
}

/// Voltage at the load end of the run.
pub fn end_voltage(w: &WireSpec) -> f64 {
    w.supply_voltage - w.current * w.loop_resistance()
}

/// Minimum voltage the load tolerates, plus the headroom kept above it.
///
/// `safety_margin` is stored in volts. It is informational: `max_wire_length`
/// solves against `min_operating_voltage` alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerBudget {
    pub min_operating_voltage: f64,
    #[serde(default)]
    pub safety_margin: f64,
}

impl Default for PowerBudget {
    fn default() -> Self {
        Self { min_operating_voltage: 4.75, safety_margin: 0.1 }
    }
}

/// Longest run whose end voltage stays at or above the budget floor.
pub fn max_wire_length(w: &WireSpec, b: &PowerBudget) -> Result<f64, PlanError> {
    if b.min_operating_voltage.partial_cmp(&w.supply_voltage) != Some(std::cmp::Ordering::Less) {
        return Err(PlanError::InfeasibleBudget { v_min: b.min_operating_voltage, supply: w.supply_voltage });
    }
    positive("cross_section", w.cross_section)?;
    positive("current", w.current)?;
    positive("resistivity", w.resistivity)?;
    let area = w.cross_section * 1e-6;
    Ok((w.supply_voltage - b.min_operating_voltage) * area / (2.0 * w.current * w.resistivity))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Bearing of `self` seen from `center`, in radians on `[0, 2π)`.
    fn bearing_from(self, center: Point2) -> f64 {
        (self.y - center.y).atan2(self.x - center.x).rem_euclid(std::f64::consts::TAU)
    }
}

/// Outer frame geometry and camera layout.
///
/// The frame is modelled as a `width` × `depth` rectangle centred on the
/// origin, with the back side at `y = -depth / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigPlan {
    pub width: f64,
    pub depth: f64,
    pub height: f64,
    pub beams: usize,
    pub cameras_per_beam: usize,
    pub min_angle_threshold: f64,
    #[serde(default)]
    pub entrance_gap_slots: usize,
}

impl Default for RigPlan {
    fn default() -> Self {
        Self {
            width: 2.90,
            depth: 2.51,
            height: 2.10,
            beams: 24,
            cameras_per_beam: 4,
            min_angle_threshold: 13.0,
            entrance_gap_slots: 0,
        }
    }
}

impl RigPlan {
    pub fn validate(&self) -> Result<(), PlanError> {
        positive("width", self.width)?;
        positive("depth", self.depth)?;
        positive("height", self.height)?;
        if self.beams < 3 {
            return Err(PlanError::InvalidParameter { name: "beams", reason: "at least 3 beams" });
        }
        if self.cameras_per_beam == 0 {
            return Err(PlanError::InvalidParameter {
                name: "cameras_per_beam",
                reason: "at least one camera per beam",
            });
        }
        if self.entrance_gap_slots >= self.beams {
            return Err(PlanError::InvalidParameter {
                name: "entrance_gap_slots",
                reason: "gap must leave at least one beam",
            });
        }
        Ok(())
    }

    pub fn perimeter(&self) -> f64 {
        2.0 * (self.width + self.depth)
    }

    pub fn beam_spacing(&self) -> f64 {
        self.perimeter() / self.beams as f64
    }

    /// Beams actually mounted (slots minus the entrance gap).
    pub fn mounted_beams(&self) -> usize {
        self.beams - self.entrance_gap_slots
    }

    pub fn camera_count(&self) -> usize {
        self.mounted_beams() * self.cameras_per_beam
    }

    pub fn center(&self) -> Point2 {
        Point2::ORIGIN
    }

    /// Midpoint of the back side, where the entrance gap is centred.
    pub fn back_midpoint(&self) -> Point2 {
        Point2::new(0.0, -self.depth / 2.0)
    }

    /// Camera heights along a beam, uniformly spaced.
    pub fn camera_heights(&self) -> Vec<f64> {
        let step = self.height / self.cameras_per_beam as f64;
        (0..self.cameras_per_beam).map(|i| (i as f64 + 0.5) * step).collect()
    }

    /// Minimum adjacent central angle of this plan's beams, in degrees.
    pub fn min_camera_angle(&self) -> Result<f64, PlanError> {
        let points = beam_positions(self);
        let gap = (self.entrance_gap_slots > 0).then(|| self.back_midpoint());
        min_adjacent_angle(&points, self.center(), gap)
    }
}

/// Point at arc length `s` along the rectangle boundary, starting at the back
/// midpoint and walking counter-clockwise.
fn perimeter_point(width: f64, depth: f64, s: f64) -> Point2 {
    let (hw, hd) = (width / 2.0, depth / 2.0);
    let mut s = s.rem_euclid(2.0 * (width + depth));
    let legs = [
        (hw, Point2::new(0.0, -hd), (1.0, 0.0)),
        (depth, Point2::new(hw, -hd), (0.0, 1.0)),
        (width, Point2::new(hw, hd), (-1.0, 0.0)),
        (depth, Point2::new(-hw, hd), (0.0, -1.0)),
        (hw, Point2::new(-hw, -hd), (1.0, 0.0)),
    ];
    for (len, start, (dx, dy)) in legs {
        if s <= len {
            return Point2::new(start.x + dx * s, start.y + dy * s);
        }
        s -= len;
    }
    Point2::new(0.0, -hd)
}

/// Beams at equal arc-length spacing along the frame boundary.
///
/// Without a gap, slot 0 sits at the back midpoint. With an entrance gap of
/// `g` slots the slot lattice is shifted so that the `g` omitted slots are
/// symmetric about the back midpoint.
pub fn beam_positions(r: &RigPlan) -> Vec<Point2> {
    let spacing = r.beam_spacing();
    let gap = r.entrance_gap_slots;
    let offset = if gap == 0 { 0.0 } else { (gap as f64 - 1.0) / 2.0 };
    (gap..r.beams).map(|k| perimeter_point(r.width, r.depth, (k as f64 - offset) * spacing)).collect()
}

/// Smallest central angle (degrees) between bearing-adjacent points as seen
/// from `center`. When `gap_direction` is given, the adjacent pair whose arc
/// contains that direction is the entrance and is left out.
pub fn min_adjacent_angle(points: &[Point2], center: Point2, gap_direction: Option<Point2>) -> Result<f64, PlanError> {
    if points.len() < 2 {
        return Err(PlanError::TooFewPoints { required: 2, got: points.len() });
    }
    let mut bearings = Vec::with_capacity(points.len());
    for (index, p) in points.iter().enumerate() {
        if p.distance(center) < 1e-12 {
            return Err(PlanError::DegenerateCenter { index });
        }
        bearings.push(p.bearing_from(center));
    }
    bearings.sort_by(f64::total_cmp);
    let gap_bearing = gap_direction.map(|g| g.bearing_from(center));

    let tau = std::f64::consts::TAU;
    let n = bearings.len();
    let mut min = f64::INFINITY;
    for i in 0..n {
        let from = bearings[i];
        let sweep = (bearings[(i + 1) % n] - from).rem_euclid(tau);
        if let Some(g) = gap_bearing {
            if (g - from).rem_euclid(tau) < sweep {
                continue;
            }
        }
        min = min.min(sweep);
    }
    Ok(min.to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferModel {
    pub node_count: u32,
    pub images_per_node: u32,
    pub bytes_per_image: f64,
    pub nic_bandwidth: f64,
    pub sd_read_rate: f64,
    pub fixed_overhead: f64,
}

impl Default for TransferModel {
    fn default() -> Self {
        Self {
            node_count: 96,
            images_per_node: 2,
            bytes_per_image: 2.0e6,
            nic_bandwidth: 125.0e6,
            sd_read_rate: 15.0e6,
            fixed_overhead: 0.5,
        }
    }
}

impl TransferModel {
    pub fn total_bytes(&self) -> f64 {
        self.node_count as f64 * self.images_per_node as f64 * self.bytes_per_image
    }

    pub fn per_node_bytes(&self) -> f64 {
        self.images_per_node as f64 * self.bytes_per_image
    }
}

/// Seconds to move a full capture set to the coordinator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferWindow {
    pub lower: f64,
    pub upper: f64,
}

impl TransferWindow {
    pub fn contains(&self, secs: f64) -> bool {
        (self.lower..=self.upper).contains(&secs)
    }
}

/// `lower` assumes perfectly pipelined, NIC-bound transfer; `upper` adds one
/// node's un-overlapped SD-card read.
pub fn transfer_time_window(t: &TransferModel) -> TransferWindow {
    let lower = t.total_bytes() / t.nic_bandwidth + t.fixed_overhead;
    let upper = lower + t.per_node_bytes() / t.sd_read_rate;
    TransferWindow { lower, upper }
}
