use std::path::PathBuf;

use thiserror::Error;

use crate::ir::LayerId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error at layer {layer:?}: {msg}")]
    Validation { layer: Option<LayerId>, msg: String },
    #[error("graph contains a cycle through layer {0}")]
    Cycle(LayerId),
    #[error("config field `{field}` out of range: {msg}")]
    Range { field: &'static str, msg: String },
    #[error("layer {0} is not a CONV/FC layer")]
    UnsupportedLayer(LayerId),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("model needs {needed} arrays at replication 1, hardware has {available}")]
    Capacity { needed: usize, available: usize },
    #[error("core {core}: {needed} physical arrays needed, {available} available")]
    PhysicalCapacity { core: usize, needed: usize, available: usize },
    #[error("weight value {0} does not fit the configured weight precision")]
    Overflow(i64),
    #[error("core {core}: local memory overflow (need {needed} bytes, high-water {high_water}, size {size})")]
    LocalMemOverflow { core: usize, needed: u64, high_water: u64, size: u64 },
    #[error("deadlock: blocked instructions {0:?}")]
    Deadlock(Vec<(usize, usize)>),
    #[error("uninitialized read on core {core:?} at byte {addr} (instruction {pos})")]
    UninitializedRead { core: Option<usize>, addr: u64, pos: usize },
    #[error("power table missing from hardware config")]
    MissingPowerData,
    #[error("format error: {0}")]
    Format(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn invalid(layer: impl Into<Option<LayerId>>, msg: impl Into<String>) -> Self {
        Error::Validation { layer: layer.into(), msg: msg.into() }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }

    /// Short machine-readable kind, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse(_) => "parse",
            Error::Validation { .. } => "validation",
            Error::Cycle(_) => "cycle",
            Error::Range { .. } => "range",
            Error::UnsupportedLayer(_) => "unsupported-layer",
            Error::Shape(_) => "shape",
            Error::Capacity { .. } => "capacity",
            Error::PhysicalCapacity { .. } => "physical-capacity",
            Error::Overflow(_) => "overflow",
            Error::LocalMemOverflow { .. } => "local-mem-overflow",
            Error::Deadlock(_) => "deadlock",
            Error::UninitializedRead { .. } => "uninitialized-read",
            Error::MissingPowerData => "missing-power-data",
            Error::Format(_) => "format",
            Error::Stage { source, .. } => source.kind(),
        }
    }
}
