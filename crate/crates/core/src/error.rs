use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SromError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SromError {
    #[error("Newton iteration did not converge at time step {step} (residual {residual:.3e})")]
    NewtonDivergence { step: usize, residual: f64 },

    #[error("matrix is not tangent at the basepoint (skew residual {residual:.3e})")]
    NotTangent { residual: f64 },

    #[error("Stiefel logarithm did not converge after {iterations} iterations (residual {residual:.3e})")]
    LogNoConvergence { iterations: usize, residual: f64 },

    #[error("requested {requested} modes but the numerical rank is {rank}")]
    RankDeficient { requested: usize, rank: usize },

    #[error("no rank up to {max_rank} reaches energy error below {threshold}")]
    Unreachable { threshold: f64, max_rank: usize },

    #[error("ill-conditioned regression (condition estimate {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("every regularization candidate produced an unstable reduced model")]
    AllUnstable,

    #[error("reduced state blew up at t = {time:.4} (norm {norm:.3e})")]
    BlowUp { time: f64, norm: f64 },

    #[error("step size underflow at t = {time:.4}")]
    StepSizeUnderflow { time: f64 },

    #[error("reference-centered snapshot norm is too small for a relative error")]
    DegenerateDenominator,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cluster {0} is empty")]
    EmptyCluster(usize),

    #[error("concentration QP is infeasible")]
    InfeasibleQp,

    #[error("{failed} of {total} samples failed, above the allowed fraction")]
    TooManyFailures { failed: usize, total: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic bytes in matrix file")]
    BadMagic,

    #[error("matrix file is truncated")]
    TruncatedFile,

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scenario {id}: {source}")]
    Scenario {
        id: usize,
        #[source]
        source: Box<SromError>,
    },

    #[error("anchor {index}: {source}")]
    Anchor {
        index: usize,
        #[source]
        source: Box<SromError>,
    },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<SromError>,
    },

    #[error("scenarios {first} and {second}: {source}")]
    Pair {
        first: usize,
        second: usize,
        #[source]
        source: Box<SromError>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<SromError>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl SromError {
    pub fn in_scenario(self, id: usize) -> Self {
        SromError::Scenario {
            id,
            source: Box::new(self),
        }
    }

    pub fn in_anchor(self, index: usize) -> Self {
        SromError::Anchor {
            index,
            source: Box::new(self),
        }
    }

    pub fn in_sample(self, index: usize) -> Self {
        SromError::Sample {
            index,
            source: Box::new(self),
        }
    }

    pub fn in_pair(self, first: usize, second: usize) -> Self {
        SromError::Pair {
            first,
            second,
            source: Box::new(self),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        SromError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SromError::Io {
            path: path.into(),
            source,
        }
    }

    /// Innermost error with all context wrappers removed.
    pub fn root(&self) -> &SromError {
        match self {
            SromError::Scenario { source, .. }
            | SromError::Anchor { source, .. }
            | SromError::Sample { source, .. }
            | SromError::Pair { source, .. }
            | SromError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
