//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TurbError {
    /// Mismatched grids, bad window sizes, missing inputs — anything that is a
    /// misconfiguration rather than a numerical failure.
    #[error("configuration error: {0}")]
    Config(String),

    /// A physical or statistical parameter is out of its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An index or crop window falls outside the addressed array.
    #[error("range error: {0}")]
    Range(String),

    /// A quadrature or iterative scheme failed to reach its tolerance.
    #[error("accuracy error: {0} (achieved {1:e})")]
    Accuracy(String, f64),

    /// The pupil field was identically zero; no PSF can be formed.
    #[error("degenerate PSF: {0}")]
    DegeneratePsf(String),

    /// Alternating minimization increased its objective repeatedly.
    #[error("divergence: {0}")]
    Divergence(String),

    /// β calibration found no grid point meeting the tolerance.
    #[error("calibration failure: {0}")]
    Calibration(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, TurbError>;

impl TurbError {
    pub fn config(msg: impl Into<String>) -> Self {
        TurbError::Config(msg.into())
    }
    pub fn parameter(msg: impl Into<String>) -> Self {
        TurbError::Parameter(msg.into())
    }
    pub fn range(msg: impl Into<String>) -> Self {
        TurbError::Range(msg.into())
    }
}
