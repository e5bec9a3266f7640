//! LED lighting state and projector patterns.
//!
//! Each MOSFET board drives four LED stripes from one node's GPIO pins and
//! supports three brightness levels. Projectors show either a black frame
//! (texture exposure) or a seeded random-dot pattern (matching exposure).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

pub const STRIPES_PER_CONTROLLER: usize = 4;

/// Default projector resolution (Optoma GT760 native).
pub const DEFAULT_PATTERN_WIDTH: u32 = 1280;
pub const DEFAULT_PATTERN_HEIGHT: u32 = 800;

/// LED brightness. Serialized as the bare percentage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum LightLevel {
    Off,
    Half,
    Full,
}

impl LightLevel {
    pub const ALL: [LightLevel; 3] = [LightLevel::Off, LightLevel::Half, LightLevel::Full];

    pub fn percent(self) -> u8 {
        match self {
            LightLevel::Off => 0,
            LightLevel::Half => 50,
            LightLevel::Full => 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("light level must be one of 0, 50, 100 (got {0})")]
pub struct InvalidLightLevel(pub String);

impl TryFrom<u8> for LightLevel {
    type Error = InvalidLightLevel;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(LightLevel::Off),
            50 => Ok(LightLevel::Half),
            100 => Ok(LightLevel::Full),
            other => Err(InvalidLightLevel(other.to_string())),
        }
    }
}

impl From<LightLevel> for u8 {
    fn from(l: LightLevel) -> u8 {
        l.percent()
    }
}

impl std::str::FromStr for LightLevel {
    type Err = InvalidLightLevel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim().trim_end_matches('%');
        trimmed
            .parse::<u8>()
            .map_err(|_| InvalidLightLevel(s.to_string()))
            .and_then(LightLevel::try_from)
            .map_err(|_| InvalidLightLevel(s.to_string()))
    }
}

impl std::fmt::Display for LightLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}%", self.percent())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("stripe index {index} out of range (rig has {count} stripes)")]
pub struct IndexOutOfRange {
    pub index: usize,
    pub count: usize,
}

/// Stripe-to-board wiring: stripe `i` is channel `i mod 4` of board `i div 4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StripeLayout {
    pub stripe_count: usize,
}

impl StripeLayout {
    pub fn new(stripe_count: usize) -> Self {
        Self { stripe_count }
    }

    pub fn controller_count(&self) -> usize {
        self.stripe_count.div_ceil(STRIPES_PER_CONTROLLER)
    }

    pub fn controller_for_stripe(&self, stripe_index: usize) -> Result<(usize, usize), IndexOutOfRange> {
        if stripe_index >= self.stripe_count {
            return Err(IndexOutOfRange { index: stripe_index, count: self.stripe_count });
        }
        Ok((stripe_index / STRIPES_PER_CONTROLLER, stripe_index % STRIPES_PER_CONTROLLER))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatternKind {
    Black,
    RandomDot,
}

/// What a projector shows. For `Black`, `seed` and `density` are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub kind: PatternKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_density")]
    pub density: f64,
    pub width: u32,
    pub height: u32,
}

impl PatternSpec {
    /// The pattern shown by the projector on `beam`. With per-projector seeds
    /// each beam offsets the seed by its index; otherwise every projector
    /// shows `self`.
    pub fn for_beam(&self, beam: u32, per_projector_seeds: bool) -> PatternSpec {
        if per_projector_seeds {
            PatternSpec { seed: self.seed.wrapping_add(u64::from(beam)), ..*self }
        } else {
            *self
        }
    }
}

fn default_density() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatternError {
    #[error("pattern dimensions must be positive")]
    EmptyImage,
    #[error("dot density must lie strictly between 0 and 1")]
    DensityOutOfRange,
}

impl PatternSpec {
    pub fn black(width: u32, height: u32) -> Self {
        Self { kind: PatternKind::Black, seed: 0, density: default_density(), width, height }
    }

    pub fn random_dot(seed: u64, density: f64, width: u32, height: u32) -> Self {
        Self { kind: PatternKind::RandomDot, seed, density, width, height }
    }

    pub fn validate(&self) -> Result<(), PatternError> {
        if self.width == 0 || self.height == 0 {
            return Err(PatternError::EmptyImage);
        }
        if self.kind == PatternKind::RandomDot && !(self.density > 0.0 && self.density < 1.0) {
            return Err(PatternError::DensityOutOfRange);
        }
        Ok(())
    }
}

impl Default for PatternSpec {
    fn default() -> Self {
        Self::random_dot(0, default_density(), DEFAULT_PATTERN_WIDTH, DEFAULT_PATTERN_HEIGHT)
    }
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let header = format!("P5\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.pixels.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn white_fraction(&self) -> f64 {
        let white = self.pixels.iter().filter(|&&p| p == 255).count();
        white as f64 / self.pixels.len().max(1) as f64
    }
}

/// Renders a pattern. Random-dot pixels are i.i.d.: one SplitMix64 draw per
/// pixel in row-major order, white when the draw (as a unit float) falls
/// below `density`.
pub fn generate_pattern(p: &PatternSpec) -> Result<GrayImage, PatternError> {
    p.validate()?;
    let n = p.width as usize * p.height as usize;
    let pixels = match p.kind {
        PatternKind::Black => vec![0u8; n],
        PatternKind::RandomDot => {
            let mut rng = SplitMix64::new(p.seed);
            (0..n).map(|_| if rng.next_f64() < p.density { 255 } else { 0 }).collect()
        }
    };
    Ok(GrayImage { width: p.width, height: p.height, pixels })
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("light controller {controller} unreachable")]
pub struct ControllerUnreachable {
    pub controller: u32,
}

/// One MOSFET board.
pub trait LightController: Send {
    fn id(&self) -> u32;
    fn apply(&mut self, level: LightLevel) -> Result<(), ControllerUnreachable>;
    fn level(&self) -> Option<LightLevel>;
}

/// Records every applied level; can be switched unreachable.
#[derive(Debug, Clone, Default)]
pub struct MockLightController {
    pub id: u32,
    pub level: Option<LightLevel>,
    pub reachable: bool,
    pub history: Vec<LightLevel>,
}

impl MockLightController {
    pub fn new(id: u32) -> Self {
        Self { id, level: None, reachable: true, history: Vec::new() }
    }
}

impl LightController for MockLightController {
    fn id(&self) -> u32 {
        self.id
    }

    fn apply(&mut self, level: LightLevel) -> Result<(), ControllerUnreachable> {
        if !self.reachable {
            return Err(ControllerUnreachable { controller: self.id });
        }
        self.history.push(level);
        self.level = Some(level);
        Ok(())
    }

    fn level(&self) -> Option<LightLevel> {
        self.level
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LightAck {
    pub controller: u32,
    pub level: LightLevel,
    /// False when the controller already held this level.
    pub changed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LightReport {
    pub acks: Vec<LightAck>,
    pub failures: Vec<ControllerUnreachable>,
}

impl LightReport {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Sets every controller to `level`, reporting per-controller outcomes.
/// Controllers already at `level` are acknowledged without being touched.
pub fn set_light_level<C: LightController + ?Sized>(level: LightLevel, controllers: &mut [Box<C>]) -> LightReport {
    let mut report = LightReport::default();
    for c in controllers.iter_mut() {
        if c.level() == Some(level) {
            report.acks.push(LightAck { controller: c.id(), level, changed: false });
            continue;
        }
        match c.apply(level) {
            Ok(()) => report.acks.push(LightAck { controller: c.id(), level, changed: true }),
            Err(e) => report.failures.push(e),
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("projector failure: {0}")]
pub struct ProjectorError(pub String);

pub trait Projector: Send {
    fn show(&mut self, pattern: &PatternSpec, image: &GrayImage) -> Result<(), ProjectorError>;
}

/// Keeps the last shown pattern and a count of frames shown.
#[derive(Debug, Clone, Default)]
pub struct MockProjector {
    pub showing: Option<PatternSpec>,
    pub shown: usize,
    pub fail: bool,
}

impl Projector for MockProjector {
    fn show(&mut self, pattern: &PatternSpec, _image: &GrayImage) -> Result<(), ProjectorError> {
        if self.fail {
            return Err(ProjectorError("injected".into()));
        }
        self.showing = Some(*pattern);
        self.shown += 1;
        Ok(())
    }
}
