use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera timings: {0}")]
    InvalidTimings(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("no signal leverage: attacker-light headroom {headroom:.3e} is below {threshold:.0e}")]
    NoSignalLeverage { headroom: f64, threshold: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("class index {index} out of range for {classes} classes")]
    InvalidClass { index: usize, classes: usize },

    #[error("classifier bridge: {0}")]
    Bridge(String),

    #[error("training reached {accuracy:.4} test accuracy, below the required {required:.4}")]
    TrainingFailed { accuracy: f64, required: f64 },

    #[error("cannot reach mean intensity {target:.4}: {reason}")]
    UnreachableMean { target: f64, reason: String },

    #[error("malformed PWM schedule: {0}")]
    MalformedSchedule(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("no signal for exposure {exposure_us} us")]
    MissingSignal { exposure_us: f64 },

    #[error("signal bank: {0}")]
    Bank(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidTimings(_) => "invalid_timings",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::OutOfRange(_) => "out_of_range",
            Error::NoSignalLeverage { .. } => "no_signal_leverage",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidClass { .. } => "invalid_class",
            Error::Bridge(_) => "bridge",
            Error::TrainingFailed { .. } => "training_failed",
            Error::UnreachableMean { .. } => "unreachable_mean",
            Error::MalformedSchedule(_) => "malformed_schedule",
            Error::Parse(_) => "parse",
            Error::MissingSignal { .. } => "missing_signal",
            Error::Bank(_) => "bank",
            Error::File { .. } | Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
