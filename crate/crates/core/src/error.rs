use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("index {index} out of range for {len} sites")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("integration failed at t = {last_good_time}: {reason}")]
    IntegrationFailure { last_good_time: f64, reason: String },

    #[error("physicality violated at t = {time}: {detail}")]
    Physicality { time: f64, detail: String },

    #[error("phase undefined for site {site}: amplitude {amplitude:.3e} below {threshold:.3e}")]
    PhaseUndefined {
        site: usize,
        amplitude: f64,
        threshold: f64,
    },

    #[error("window [{t_i}, {t_f}] not covered by data spanning [{data_start}, {data_end}]")]
    WindowOutsideData {
        t_i: f64,
        t_f: f64,
        data_start: f64,
        data_end: f64,
    },

    #[error("non-uniform sampling grid: {0}")]
    NonUniformGrid(String),

    #[error("steady state not unique: {0}")]
    DegenerateSteadyState(String),

    #[error("truncation {dim} exceeds cap {cap}: {guidance}")]
    TruncationCap {
        dim: usize,
        cap: usize,
        guidance: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
