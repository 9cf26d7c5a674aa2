use thiserror::Error;

/// Errors produced by the numerical kernels and the experiment runner.
#[derive(Debug, Error)]
pub enum MixlabError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("level {level} is outside the admissible range {range}")]
    LevelOutOfRange { level: f64, range: String },

    #[error("integrator stalled at t = {t}: {reason}")]
    Stall { t: f64, reason: String },

    #[error("orbit did not return to the section within t = {max_time}")]
    NoReturn { max_time: f64 },

    #[error("no regular level found: {0}")]
    DegenerateField(String),

    #[error("CFL violation: dt = {dt} exceeds limit {limit}")]
    Cfl { dt: f64, limit: f64 },

    #[error("point is outside the chart annulus: {0}")]
    OutsideChart(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("expression parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MixlabError {
    /// Stable machine-readable tag, used in error JSON and FFI status codes.
    pub fn kind(&self) -> &'static str {
        match self {
            MixlabError::InvalidArgument(_) => "invalid_argument",
            MixlabError::LevelOutOfRange { .. } => "level_out_of_range",
            MixlabError::Stall { .. } => "stall",
            MixlabError::NoReturn { .. } => "no_return",
            MixlabError::DegenerateField(_) => "degenerate_field",
            MixlabError::Cfl { .. } => "cfl",
            MixlabError::OutsideChart(_) => "outside_chart",
            MixlabError::Fit(_) => "fit",
            MixlabError::Parse { .. } => "parse",
            MixlabError::Config(_) => "config",
            MixlabError::UnknownExperiment(_) => "unknown_experiment",
            MixlabError::Io(_) => "io",
            MixlabError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, MixlabError>;

pub(crate) fn invalid(msg: impl Into<String>) -> MixlabError {
    MixlabError::InvalidArgument(msg.into())
}
