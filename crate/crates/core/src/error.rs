use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can surface.
///
/// Variants are grouped by [`ErrorClass`] so front ends can map them onto
/// stable exit codes without matching on individual variants.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("dtype error: expected {expected}, found {found}")]
    Dtype { expected: String, found: String },

    #[error("unsupported boundary: {0}")]
    UnsupportedBoundary(String),

    #[error("assembly error at {seam} seam: {detail}")]
    Assembly { seam: String, detail: String },

    #[error(
        "no feasible stitch under budget {limit} ({metric}); minimum achievable cost is {min_cost}"
    )]
    Infeasible {
        metric: String,
        limit: u64,
        min_cost: String,
    },

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("corruption error in {path}: {detail}")]
    Corruption { path: PathBuf, detail: String },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Contract,
    Storage,
    Infeasible,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Corruption { .. } | Error::Format { .. } | Error::Io { .. } => {
                ErrorClass::Storage
            }
            Error::Infeasible { .. } => ErrorClass::Infeasible,
            _ => ErrorClass::Contract,
        }
    }

    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Range(_) => "range",
            Error::Lookup(_) => "lookup",
            Error::Dtype { .. } => "dtype",
            Error::UnsupportedBoundary(_) => "unsupported-boundary",
            Error::Assembly { .. } => "assembly",
            Error::Infeasible { .. } => "infeasible",
            Error::Pairing(_) => "pairing",
            Error::Data(_) => "data",
            Error::Diverged { .. } => "diverged",
            Error::Corruption { .. } => "corruption",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn corruption(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Corruption {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
