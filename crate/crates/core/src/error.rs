use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate control grid: {0}")]
    DegenerateGrid(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("insufficient history: model needs {needed} observed steps, got {got}")]
    InsufficientHistory { needed: usize, got: usize },
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("image too small for SSIM: {height}x{width}, need at least 11x11")]
    TooSmall { height: usize, width: usize },
    #[error("no pixel is valid in both flow fields")]
    NoOverlap,
    #[error("non-finite objective at iteration {0}")]
    NonFinite(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub(crate) fn check_size(what: &str, expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::SizeMismatch(format!(
            "{what}: expected {}x{}, got {}x{}",
            expected.0, expected.1, got.0, got.1
        )));
    }
    Ok(())
}
