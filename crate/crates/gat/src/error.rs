use thiserror::Error;

#[derive(Error, Debug)]
pub enum GatError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unbound leaf '{0}'")]
    UnboundLeaf(String),
    #[error("unknown leaf '{0}'")]
    UnknownLeaf(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("output node is not scalar")]
    NonScalarOutput,
    #[error("tape not in record-backward mode: gradient was computed without recording")]
    TapeNotRecording,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("checksum mismatch: expected {expected:08x}, got {actual:08x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GatError>;
