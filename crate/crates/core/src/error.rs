use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient blocks: {blocks} local-mean blocks available, at least 3 required")]
    InsufficientBlocks { blocks: usize },

    #[error("model evaluation error at x={x:?}, theta={theta:?}")]
    ModelEval { x: Vec<f64>, theta: Vec<f64> },

    #[error("non-PD effective diffusion at block {block}, alpha={alpha:?}")]
    NonPdDiffusion { block: usize, alpha: Vec<f64> },

    #[error("degenerate posterior: {0}")]
    DegeneratePosterior(String),

    #[error("path explosion at observation step {step}")]
    Explosion { step: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular information block: {0}")]
    Singular(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{failed} of {total} replications failed: {detail}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for errors caused by invalid user configuration rather than by
    /// the data or numerics.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Domain(_))
    }
}
