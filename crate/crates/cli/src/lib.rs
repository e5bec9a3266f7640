//! Operator tooling for the capture rig: the `digitizer` CLI, the
//! coordinator service runtime and the node agent daemon runtime.

pub mod cli;
pub mod client;
pub mod node;
pub mod render;
pub mod server;

pub use cli::{exit, run};
