//! Orchestration core for a multi-camera photogrammetry capture rig.
//!
//! The crate holds the sans-IO state machines (node agent, coordinator,
//! capture-session FSM, fleet scheduler), the wire protocol, rig planning
//! calculators, and a deterministic virtual-time simulator that runs the same
//! state machines over a modelled network.

pub mod agent;
pub mod coordinator;
pub mod fleet;
pub mod lighting;
pub mod planner;
pub mod protocol;
pub mod rng;
pub mod sim;
pub mod time;

pub use lighting::{LightLevel, PatternKind, PatternSpec};
pub use protocol::{FrameKey, FrameMetadata, Message, NodeId, Phase, SessionId};
pub use time::Timestamp;
