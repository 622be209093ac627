use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("timestep {t} out of range 0..={max}")]
    Timestep { t: usize, max: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("singular coefficient at timestep {0}: alpha_bar is 1")]
    SingularCoefficient(usize),

    #[error("timestep ordering violated: t_prev={t_prev} must be < t={t}")]
    Ordering { t: usize, t_prev: usize },

    #[error("regression target has zero variance")]
    DegenerateTarget,

    #[error("underdetermined regression: {samples} samples for {regressors} regressors")]
    Underdetermined { samples: usize, regressors: usize },

    #[error("internal consistency violated: {0}")]
    Consistency(String),

    #[error("scene generation failed after {0} attempts: no uniquely referable object")]
    Generation(usize),

    #[error("training diverged at epoch {epoch}, step {step}: loss={loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
