use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(
        "propagation distance {distance:.4e} m aliases the transfer function; maximum safe distance is {max_safe:.4e} m"
    )]
    Aliased { distance: f64, max_safe: f64 },

    #[error("physics validation failed: {0}")]
    Physics(String),

    #[error("featureless field")]
    Featureless,

    #[error("position graph is disconnected; components: {}", format_components(.0))]
    Disconnected(Vec<Vec<usize>>),

    /// Disconnected graph with a diagnosis of why edges were rejected.
    #[error("position graph is disconnected: {detail}; components: {}", format_components(.components))]
    Graph {
        components: Vec<Vec<usize>>,
        detail: String,
    },

    #[error("non-finite field at frame {frame} during {stage}")]
    Diverged { frame: usize, stage: &'static str },

    #[error("reconstruction diverged: {0}")]
    Divergence(String),

    #[error("missing modulator: supply a calibration file (run `modscan calibrate`) or a dataset with truth")]
    MissingModulator,

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_components(components: &[Vec<usize>]) -> String {
    components
        .iter()
        .map(|c| format!("{c:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
