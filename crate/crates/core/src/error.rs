use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid alphabet: {0}")]
    Alphabet(String),

    #[error("token {token} is out of range for an alphabet of {size} symbols")]
    TokenOutOfRange { token: usize, size: usize },

    #[error("sequence is not clean: dimension {dim} holds the mask token")]
    NotClean { dim: usize },

    #[error("time {t} is outside the admissible range {range}")]
    Time { t: f64, range: &'static str },

    #[error("state {from} is unreachable under the forward process (kernel probability 0)")]
    UnreachableState { from: usize },

    #[error("negative stay probability {stay:.3e} at dimension {dim} (t = {t}, dt = {dt}); reduce the step size")]
    NegativeStay { dim: usize, stay: f64, t: f64, dt: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("log of zero reference rate at dimension {dim}, target {target}")]
    ZeroReferenceRate { dim: usize, target: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted at {phase} epoch {epoch}: {reason}")]
    Training {
        phase: &'static str,
        epoch: usize,
        reason: String,
    },

    #[error("ODE integration produced negative mass {mass:.3e} in state {state} at t = {t}")]
    NegativeMass { state: usize, mass: f64, t: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
