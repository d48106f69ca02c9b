use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate descriptor: {0}")]
    DegenerateDescriptor(String),

    #[error("degenerate class {class}: needs at least 2 descriptors, has {size}")]
    DegenerateClass { class: usize, size: usize },

    #[error("pool exhausted: {0}")]
    PoolExhausted(String),

    #[error("numerical failure (episode seed {seed}): {detail}")]
    NumericalFailure { seed: u64, detail: String },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("unknown {kind} '{name}' (registered: {known})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
