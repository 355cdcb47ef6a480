use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, width, mode).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity surfaced in a value or gradient.
    #[error("numeric fault in `{op}`{}", context_suffix(.context))]
    NumericFault { op: &'static str, context: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file was readable but its contents are malformed.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// The scripted demonstrator could not solve a sampled placement.
    #[error("demonstrator failed on task {task} (seed {seed})")]
    DemonstratorFailure { task: String, seed: u64 },
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Attach extra provenance (epoch, batch, trial) to a numeric fault.
    pub fn with_context(self, extra: impl AsRef<str>) -> Self {
        match self {
            Error::NumericFault { op, context } => {
                let context = if context.is_empty() {
                    extra.as_ref().to_string()
                } else {
                    format!("{context}; {}", extra.as_ref())
                };
                Error::NumericFault { op, context }
            }
            other => other,
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::DemonstratorFailure { .. } => 2,
            Error::NumericFault { .. } => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
        }
    }
}
