//! Compiler and profiler for DNN inference on processing-in-memory
//! crossbar accelerators.

pub mod artifacts;
pub mod backend;
pub mod error;
pub mod fixtures;
pub mod hw;
pub mod ir;
pub mod isa;
pub mod layout;
pub mod mapping;
pub mod par;
pub mod partition;
pub mod pipeline;
pub mod profiler;
pub mod sched;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Compilation target: pipelined throughput or single-sample latency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// High throughput.
    Ht,
    /// Low latency.
    Ll,
}
