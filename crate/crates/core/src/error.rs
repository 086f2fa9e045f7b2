use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid must have at least one cell")]
    EmptyGrid,
    #[error("time {0} lies outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("grid mismatch: {left} cells vs {right} cells")]
    GridMismatch { left: usize, right: usize },
    #[error("declared kernel element {index} is not annihilated (|Av|/|v| = {ratio:e})")]
    KernelNotAnnihilated { index: usize, ratio: f64 },
    #[error("declared kernel elements are linearly dependent")]
    DependentKernel,
    #[error("operator is not invertible on the complement of its kernel (smallest singular value {0:e})")]
    NotInvertible(f64),
    #[error("operator has an infinite-dimensional kernel")]
    InfiniteKernel,
    #[error("empty vector list")]
    EmptyList,
    #[error("basis is not orthonormal (deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("vectors are linearly dependent")]
    Dependent,
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("too many rejected samples: {rejected} of {total}")]
    TooManyRejections { rejected: usize, total: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
