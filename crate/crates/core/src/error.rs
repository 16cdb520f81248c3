use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not agree with what an operation requires.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A configuration value is invalid (bad groups, k > n, p outside [0,1), ...).
    #[error("config error: {0}")]
    Config(String),
    /// Input data is malformed (out-of-range label, corrupt image, ...).
    #[error("data error: {0}")]
    Data(String),
    /// An operation was invoked in the wrong order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),
    /// A NaN or infinity surfaced where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serialization(String),
}

/// Distinct failure modes when reading a checkpoint container.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated checkpoint: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("checksum mismatch: file is corrupted")]
    ChecksumMismatch,
    #[error(
        "parameter names do not match the model: {} missing{}, {} unexpected{}",
        missing.len(),
        preview(missing),
        unexpected.len(),
        preview(unexpected)
    )]
    NameMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("shape mismatch for {name}: checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("dtype mismatch: checkpoint holds {found}, model uses {expected}")]
    DtypeMismatch { found: String, expected: String },
    #[error("malformed checkpoint metadata: {0}")]
    Malformed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use dim_err;

/// First few names of a list, for error messages.
fn preview(names: &[String]) -> String {
    const SHOWN: usize = 3;
    if names.is_empty() {
        return String::new();
    }
    let head = names.iter().take(SHOWN).map(String::as_str).collect::<Vec<_>>().join(", ");
    if names.len() > SHOWN {
        format!(" ({head}, ...)")
    } else {
        format!(" ({head})")
    }
}
