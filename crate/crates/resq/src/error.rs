use std::path::{Path, PathBuf};

/// Errors raised by file formats, configuration and orchestration.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] resq_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("lineage mismatch: {0}")]
    Lineage(String),

    /// A stage failed; `checkpoint` is the last artifact that was written.
    #[error("{source} (last good checkpoint: {})", checkpoint.as_deref().map_or("none".into(), |p| p.display().to_string()))]
    Stage {
        #[source]
        source: Box<Error>,
        checkpoint: Option<PathBuf>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Short machine-readable category, also used to pick the exit code.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Core(e) => match e {
                resq_core::Error::Dimension(_) => "dimension",
                resq_core::Error::Contract(_) => "contract",
                resq_core::Error::Diverged { .. } => "diverged",
                resq_core::Error::DegenerateLayer { .. } => "degenerate",
                resq_core::Error::Format(_) => "format",
                resq_core::Error::SearchFailed { .. } => "search_failed",
            },
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Lineage(_) => "lineage",
            Error::Stage { source, .. } => source.category(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "io" => 3,
            "format" => 4,
            "lineage" => 5,
            "diverged" => 6,
            "search_failed" => 7,
            "contract" | "dimension" | "degenerate" => 8,
            _ => 1,
        }
    }
}
