use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: decomposition failed ({reason})")]
    Decomposition { op: &'static str, reason: String },

    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("true channel has zero energy; NMSE undefined")]
    ZeroChannel,

    #[error("water-filling needs at least one positive gain")]
    AllGainsZero,

    #[error("zero-norm block in {0}")]
    ZeroNorm(&'static str),

    #[error("Fisher information matrix is singular (training under-determined)")]
    SingularFim,

    #[error("virtual support only exists for on-grid channels")]
    OffGrid,

    #[error("unknown method `{name}`; valid names: {valid}")]
    UnknownMethod { name: String, valid: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
