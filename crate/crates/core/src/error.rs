use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("non-serial chain at link {0}")]
    NonSerialChain(String),

    #[error("missing mesh file {path} referenced by link {link}")]
    MissingMesh { link: String, path: PathBuf },

    #[error("invalid robot description: {0}")]
    InvalidRobot(String),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("image size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("crop rectangle outside image bounds")]
    CropOutOfBounds,

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("mask is not binary (pixel {index} = {value})")]
    NonBinaryMask { index: usize, value: f64 },

    #[error("gradients requested with hard rendering (softness = 0)")]
    NonDifferentiable,

    #[error("pose optimisation did not converge: {0}")]
    NonConvergence(String),

    #[error("swarm initialisation failed: {0}")]
    InitializationFailure(String),

    #[error("degradation calibration failed: {0}")]
    CalibrationFailure(String),

    #[error("segmentation failed in phase {phase}: {message}")]
    Segmentation { phase: usize, message: String },

    #[error("visibility unreachable: {0}")]
    VisibilityUnreachable(String),

    #[error("{0}")]
    Precondition(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    /// Stable machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::NonSerialChain(_) => "non_serial_chain",
            Error::MissingMesh { .. } => "missing_mesh",
            Error::InvalidRobot(_) => "invalid_robot",
            Error::InvalidMesh(_) => "invalid_mesh",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::SizeMismatch(..) => "size_mismatch",
            Error::InvalidConfig(_) => "invalid_config",
            Error::CropOutOfBounds => "crop_out_of_bounds",
            Error::DegenerateGeometry(_) => "degenerate_geometry",
            Error::NonBinaryMask { .. } => "non_binary_mask",
            Error::NonDifferentiable => "non_differentiable",
            Error::NonConvergence(_) => "non_convergence",
            Error::InitializationFailure(_) => "initialization_failure",
            Error::CalibrationFailure(_) => "calibration_failure",
            Error::Segmentation { .. } => "segmentation",
            Error::VisibilityUnreachable(_) => "visibility_unreachable",
            Error::Precondition(_) => "precondition",
        }
    }
}
