use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged {
        step: usize,
        loss: f64,
        trace: Vec<f64>,
    },
    #[error("forward-direction loss requires a target density with a noise model")]
    MissingNoiseModel,
    #[error("cloud of {size} points exceeds the exact-solver cap of {cap}; subsample and average")]
    TooLarge { size: usize, cap: usize },
    #[error("empty sample cloud")]
    Empty,
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("malformed model data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}
