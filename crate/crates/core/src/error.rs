use thiserror::Error;

/// Errors raised across the modeling and control stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("integration blow-up at t = {time:.4} s")]
    Blowup { time: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("requested {requested} components but numerical rank is {rank}; singular values: {singular_values:?}")]
    Rank {
        requested: usize,
        rank: usize,
        singular_values: Vec<f64>,
    },

    #[error("rank deficient actuator block (rank {rank} < {m}); increase the manifold dimension or excite the actuators more richly")]
    ActuatorRank { rank: usize, m: usize },

    #[error("prediction diverged at step {step}")]
    Divergence { step: usize },

    #[error("calibration required: {0}")]
    Calibration(String),

    #[error("pair is not stabilizable: uncontrollable unstable mode {re:.6} + {im:.6}i")]
    Unstabilizable { re: f64, im: f64 },

    #[error("actuator bandwidth insufficient: |K A_u|_2 = {margin:.6} >= beta = {beta:.6}")]
    InsufficientBandwidth { margin: f64, beta: f64 },

    #[error("model refused: {0}")]
    Refused(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            what: what.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}
