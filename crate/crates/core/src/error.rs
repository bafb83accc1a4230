use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("InvalidGrid: {0}")]
    InvalidGrid(String),
    #[error("InvalidIntensity: total jump probability per step {total} must lie in [0, 1)")]
    InvalidIntensity { total: f64 },
    #[error("InvalidParam: {0}")]
    InvalidParam(String),
    #[error("SingularRegression: normal equations are rank deficient at step {step} (degree {degree})")]
    SingularRegression { step: usize, degree: usize },
    #[error("ObstacleCross: lower obstacle {lower} exceeds upper obstacle {upper} at step {step}, node {node}")]
    ObstacleCross { step: usize, node: usize, lower: f64, upper: f64 },
    #[error("ImplicitDiverge: per-node fixed point did not settle after {iterations} iterations (last change {last_change:e})")]
    ImplicitDiverge { iterations: usize, last_change: f64 },
    #[error("BackendUnsupported: {0} requires the tree backend")]
    BackendUnsupported(&'static str),
    #[error("TooLarge: {0}")]
    TooLarge(String),
    #[error("NoConvergence after {iterations} iterations (last residual {last:e})")]
    NoConvergence { iterations: usize, last: f64, history: Vec<f64> },
    #[error("InvalidTerminal: terminal value {value} of particle {particle} leaves [{lower}, {upper}]")]
    InvalidTerminal {
        particle: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("EmptySample")]
    EmptySample,
    #[error("LengthMismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("UnknownScenario: {0}")]
    UnknownScenario(String),
}

pub type Result<T> = std::result::Result<T, Error>;
