use std::fmt;

use crate::numcore::ParamVector;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate vector: norm {norm:e} <= {eps:e}")]
    Degenerate { norm: f64, eps: f64 },
    #[error("layout error: {0}")]
    Layout(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("record does not match encoder modality: {0}")]
    TypeMismatch(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("{0}")]
    Divergence(Box<Divergence>),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}

/// Training hit a non-finite loss. Carries the parameters from the last
/// step that produced a finite loss.
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub last_good: Vec<ParamVector>,
}

impl fmt::Debug for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Divergence")
            .field("epoch", &self.epoch)
            .field("step", &self.step)
            .field("last_good_sets", &self.last_good.len())
            .finish()
    }
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "training diverged (non-finite loss) at epoch {} step {}",
            self.epoch, self.step
        )
    }
}
