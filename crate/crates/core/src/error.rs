use thiserror::Error;

/// Errors raised anywhere in the model, engine, analysis or I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported derivative order {order} (maximum {max})")]
    UnsupportedOrder { order: usize, max: usize },

    #[error("invalid value for `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("module {module} has a singular current-split matrix")]
    SingularModule { module: usize },

    #[error("output combinations are linearly dependent (row rank {rank}, expected {expected})")]
    DependentOutputs { rank: usize, expected: usize },

    #[error("consistent initialization failed: {0}")]
    Initialization(String),

    #[error("algebraic solve failed at t = {time} s")]
    Integration { time: f64 },

    #[error("state of charge of cell {cell} left [0, 1] at t = {time} s (value {value})")]
    SocBounds { time: f64, cell: String, value: f64 },

    #[error(
        "observer algebraic matrix (A22 - Ku*Cu) is singular; gain incompatible with the pack"
    )]
    GainIncompatible,

    #[error("matrix pencil is not regular (det(lambda*E - T) vanishes identically)")]
    SingularPencil,

    #[error("evaluation point is inconsistent: residual {residual:e} exceeds {tolerance:e}")]
    InconsistentPoint { residual: f64, tolerance: f64 },

    #[error("time grids are not aligned: {0}")]
    MisalignedGrids(String),

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("parse error in {source_name} line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularModule { .. }
                | Error::DependentOutputs { .. }
                | Error::Initialization(_)
                | Error::Integration { .. }
                | Error::SocBounds { .. }
                | Error::GainIncompatible
                | Error::SingularPencil
                | Error::InconsistentPoint { .. }
        )
    }

    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
