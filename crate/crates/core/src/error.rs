use thiserror::Error;

use crate::profiles::Entity;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layer range {lo}..={hi} is outside 1..={layers}")]
    LayerRange { lo: usize, hi: usize, layers: usize },

    #[error("invalid split (h={h}, v={v}) for a {layers}-layer model: need 1 <= h < v <= {max_v}", max_v = .layers.saturating_sub(1))]
    InvalidSplit { h: usize, v: usize, layers: usize },

    #[error("model needs at least 3 layers, got {0}")]
    TooFewLayers(usize),

    #[error("no rate configured for link {from} -> {to}")]
    MissingRate { from: Entity, to: Entity },

    #[error("unknown client id {0}")]
    UnknownClient(u32),

    #[error("invalid fleet: {}", .0.join("; "))]
    InvalidFleet(Vec<String>),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("wrong IDX magic: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },

    #[error("truncated IDX payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
