use std::path::PathBuf;

use mpsl_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("round {round}: barrier violation, missing losses from clients {missing:?}")]
    Barrier { round: u32, missing: Vec<u32> },

    #[error("transport: {0}")]
    Transport(String),

    #[error("decode at byte {offset}: {msg}")]
    Decode { offset: usize, msg: String },

    #[error("partition: {0}")]
    Partition(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("contract: {0}")]
    Contract(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
