use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: mbq_core::Error,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
}

impl HarnessError {
    pub fn validation(msg: impl Into<String>) -> Self {
        HarnessError::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 for bad inputs, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Core { source, .. } if source.is_numerical() => 2,
            HarnessError::Diverged { .. } => 2,
            _ => 1,
        }
    }
}

impl From<mbq_core::Error> for HarnessError {
    fn from(source: mbq_core::Error) -> Self {
        HarnessError::Core {
            context: "core".into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Attaches experiment context to core errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for std::result::Result<T, mbq_core::Error> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| HarnessError::Core {
            context: what(),
            source,
        })
    }
}
