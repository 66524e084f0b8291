use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("solver produced a non-finite state at step {step} (t = {t})")]
    SolverNonFinite { step: usize, t: f64 },

    #[error("solver exceeded max_steps = {max_steps} at t = {t} with attempted step size {step_size:e}")]
    MaxStepsExceeded {
        max_steps: usize,
        t: f64,
        step_size: f64,
    },

    #[error("adjoint solve failed while {phase}: {source}")]
    Adjoint {
        phase: AdjointPhase,
        #[source]
        source: Box<Error>,
    },

    #[error("sample {sample}: {source}")]
    Sample {
        sample: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("conjugate gradient did not converge after {iterations} iterations (residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("time index {index} outside the {len} trained time steps")]
    TimeIndexOutOfRange { index: usize, len: usize },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Which part of the augmented backward system went wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointPhase {
    /// The re-integrated latent state diverged from the forward trajectory.
    Reconstruction,
    /// The adjoint or the parameter accumulator blew up.
    AdjointBlowUp,
}

impl std::fmt::Display for AdjointPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AdjointPhase::Reconstruction => f.write_str("reconstructing the latent trajectory"),
            AdjointPhase::AdjointBlowUp => f.write_str("propagating the adjoint"),
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn for_sample(self, sample: usize) -> Self {
        match self {
            e @ Error::Sample { .. } => e,
            e => Error::Sample {
                sample,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
