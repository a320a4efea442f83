use std::path::PathBuf;

use crate::chem::ChemError;
use crate::numcore::NumError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error("node {node} has no neighbors and its graph has no collection node")]
    IsolatedNode { node: usize },
    #[error("structure error: {0}")]
    Structure(String),
    #[error("graph with {n} atoms is too small to decompose (need at least 3)")]
    TooSmall { n: usize },
    #[error("no masked positions")]
    EmptyMask,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
