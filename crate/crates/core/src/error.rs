use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ZF infeasible: rank {rank} < streams {streams}")]
    ZfInfeasible { rank: usize, streams: usize },

    #[error("undefined relative gain")]
    UndefinedRelativeGain,

    #[error("underdetermined without coding: {streams} streams on {rx} receive dimensions")]
    Underdetermined { streams: usize, rx: usize },

    #[error("oracle too large: {0} hypotheses (limit 4096)")]
    OracleTooLarge(usize),

    #[error("echo state property violated: spectral radius {0} must lie in (0, 1)")]
    EchoState(f64),

    #[error("readout is untrained")]
    UntrainedReadout,

    #[error("timing offset exceeds CP model: |{offset_s}| s > {bound_s} s")]
    TimingOffset { offset_s: f64, bound_s: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
