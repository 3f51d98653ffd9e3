use std::path::{Path, PathBuf};

/// Every failure the library can report. [`Error::code`] gives a stable,
/// machine-parsable tag used by the CLI and the C API.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Config(String),
    #[error("input side {0}x{1} is not divisible by 16")]
    BadResolution(usize, usize),
    #[error("no pixel reaches the threshold")]
    NoForeground,
    #[error("peak ({0}, {1}) lies outside a {2}x{3} grid")]
    PeakOutOfBounds(usize, usize, usize, usize),
    #[error("region side must be positive, got {0}")]
    DegenerateRegion(f64),
    #[error("mask has no foreground cell")]
    EmptyForeground,
    #[error("no background cell available")]
    EmptyBackground,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("decoded scale is not positive ({0} x {1})")]
    NonPositiveScale(f32, f32),
    #[error("initialization target is empty or outside the frame")]
    EmptyTarget,
    #[error("missing initialization target")]
    MissingInitTarget,
    #[error("model: {0}")]
    Model(String),
    #[error("image: {0}")]
    Image(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Config(_) => "E_CONFIG",
            Error::BadResolution(..) => "E_BAD_RESOLUTION",
            Error::NoForeground => "E_NO_FOREGROUND",
            Error::PeakOutOfBounds(..) => "E_PEAK_OUT_OF_BOUNDS",
            Error::DegenerateRegion(_) => "E_DEGENERATE_REGION",
            Error::EmptyForeground => "E_EMPTY_FOREGROUND",
            Error::EmptyBackground => "E_EMPTY_BACKGROUND",
            Error::ShapeMismatch(_) => "E_SHAPE_MISMATCH",
            Error::ChannelMismatch { .. } => "E_CHANNEL_MISMATCH",
            Error::NonFiniteLoss(_) => "E_NON_FINITE_LOSS",
            Error::NonPositiveScale(..) => "E_NON_POSITIVE_SCALE",
            Error::EmptyTarget => "E_EMPTY_TARGET",
            Error::MissingInitTarget => "E_MISSING_INIT",
            Error::Model(_) => "E_MODEL",
            Error::Image(_) => "E_IMAGE",
            Error::Dataset(_) => "E_DATASET",
            Error::InvalidArgument(_) => "E_INVALID_ARGUMENT",
        }
    }
}
