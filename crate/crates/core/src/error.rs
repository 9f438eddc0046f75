use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("need at least {needed} samples, found {found}")]
    TooFewSamples { needed: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("time {t} outside [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "target assigns zero mass to class {class} of axis '{axis}' where the estimate is positive; \
         the KL cost would be infinite, smooth the target (e.g. mix with a small uniform component)"
    )]
    InfiniteCost { axis: String, class: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("solver aborted at iteration {iteration}{}: {what}", step.map(|s| format!(", step {s}")).unwrap_or_default())]
    SolverAbort {
        iteration: usize,
        step: Option<usize>,
        what: String,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("unsupported schema_version {0}")]
    Schema(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            found,
        })
    }
}
