use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("non-finite objective at parameter {param}, entry {entry}")]
    NonFinite { param: usize, entry: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("not a permutation: {0:?}")]
    InvalidPermutation(Vec<usize>),

    #[error("eigen-decomposition did not converge within {cap} sweeps")]
    SvdNotConverged { cap: usize },

    #[error("invalid dataset at sample {sample}: {reason}")]
    InvalidSample { sample: usize, reason: String },

    #[error("no viable candidate: every (tau, tau') pair failed to decrease the training loss")]
    NoViableCandidate,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
