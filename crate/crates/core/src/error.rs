use thiserror::Error;

/// Errors raised across the simulation and analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("trap is unstable for {species}: radicand {radicand:.3e} on axis {axis}")]
    UnstableTrap {
        species: String,
        axis: char,
        radicand: f64,
    },
    #[error("no DC voltage in [{lo}, {hi}] V gives the requested frequency ratio at q_y = {q_y}")]
    NoSolution { q_y: f64, lo: f64, hi: f64 },
    #[error("ions {i} and {j} are closer than one grid cell ({separation:.3e} m)")]
    CoincidentIons { i: usize, j: usize, separation: f64 },
    #[error("minimization exceeded the move budget of {budget} in restart {restart}")]
    NotConverged { budget: usize, restart: usize },
    #[error("shell of {count} ions is collinear; no enclosing ellipse")]
    DegenerateShell { count: usize },
    #[error("fit failed: {0}")]
    FitFailed(String),
    #[error("ellipse does not fit inside the {width}x{height} frame")]
    FrameOverflow { width: usize, height: usize },
    #[error("no ring found: objective {objective:.3e} below threshold {threshold:.3e}")]
    NoRing { objective: f64, threshold: f64 },
    #[error("image shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("angular density is empty (all zero)")]
    EmptyDensity,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::UnstableTrap { .. } => 2,
            Self::NotConverged { .. } => 3,
            Self::NoRing { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
