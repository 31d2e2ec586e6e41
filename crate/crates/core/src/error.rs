//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input schedule: {0}")]
    InvalidSchedule(String),

    #[error("negative control pressure {pressure} MPa (choose magnitude/bias compatibly)")]
    NegativePressure { pressure: f64 },

    #[error("integration diverged: {0}")]
    Divergence(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("simulation blow-up at step {step}: length {length} mm left [{lo}, {hi}]")]
    SimulationBlowup {
        step: usize,
        length: f64,
        lo: f64,
        hi: f64,
    },

    #[error("harvest error: expected {expected} frames, got {got}")]
    Harvest { expected: usize, got: usize },

    #[error("reservoir initialisation failed: {0}")]
    Init(String),

    #[error("rank-deficient system: dimension {dimension} is linearly dependent")]
    RankDeficient { dimension: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate target: variance is zero")]
    DegenerateTarget,

    #[error("series too short: need at least {needed}, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("closed-loop feedback diverged after step {last_stable_step}")]
    FeedbackDivergence { last_stable_step: usize },

    #[error("basis enumeration exceeds {limit} terms")]
    BasisOverflow { limit: usize },

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::UnknownScenario(_)
            | Error::InvalidSchedule(_)
            | Error::NegativePressure { .. }
            | Error::Json(_) => 2,
            Error::SimulationBlowup { .. }
            | Error::Divergence(_)
            | Error::FeedbackDivergence { .. }
            | Error::Geometry(_) => 3,
            Error::Io(_) => 1,
            _ => 4,
        }
    }
}
