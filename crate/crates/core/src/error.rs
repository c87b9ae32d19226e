use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid direction: {0}")]
    Direction(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("frame {frame} out of range: recording holds {available} complete frames")]
    FrameOutOfRange { frame: usize, available: usize },
    #[error("channel count mismatch: recording has {recording}, geometry has {geometry}")]
    ChannelMismatch { recording: usize, geometry: usize },
    #[error("trajectory covers [{start:.3}, {end:.3}] s but {needed:.3} s are required")]
    TrajectoryCoverage { start: f64, end: f64, needed: f64 },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported sample rate {found} Hz (pipeline requires {expected} Hz)")]
    SampleRate { found: u32, expected: u32 },
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    /// Errors caused by bad inputs (as opposed to failures while running).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Divergence { .. })
    }
}
