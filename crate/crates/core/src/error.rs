use std::fmt;
use std::path::PathBuf;

use serde::Serialize;

/// A single violated configuration invariant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {}", join(.0))]
    InvalidConfig(Vec<Violation>),

    #[error("config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("degenerate Raman denominator")]
    DegenerateRaman,

    #[error("not a potential minimum")]
    NotAMinimum,

    #[error("atom not bound: {0}")]
    Unbound(String),

    #[error("time {t} s outside waveform span [0, {duration}] s")]
    TimeOutOfRange { t: f64, duration: f64 },

    #[error("galvo range exceeded: commanded {commanded} m, limit {limit} m")]
    GalvoRange { commanded: f64, limit: f64 },

    #[error("rate {rate} /s exceeds declared thinning bound {bound} /s at t = {t} s")]
    RateBoundExceeded { t: f64, rate: f64, bound: f64 },

    #[error("insufficient contrast: single-atom rate {single} /s vs background {background} /s")]
    InsufficientContrast { single: f64, background: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("outside harmonic regime: sigma {sigma} m >= waist/2 ({half_waist} m)")]
    OutsideHarmonicRegime { sigma: f64, half_waist: f64 },

    #[error("trajectory diverged: {0}")]
    Diverged(String),

    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),

    #[error("trial {trial}: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn join(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    /// Short machine-readable tag used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::Parse { .. } => "parse",
            Error::DegenerateRaman => "degenerate_raman",
            Error::NotAMinimum => "not_a_minimum",
            Error::Unbound(_) => "unbound",
            Error::TimeOutOfRange { .. } => "time_out_of_range",
            Error::GalvoRange { .. } => "galvo_range",
            Error::RateBoundExceeded { .. } => "rate_bound_exceeded",
            Error::InsufficientContrast { .. } => "insufficient_contrast",
            Error::InsufficientData(_) => "insufficient_data",
            Error::EmptyInput(_) => "empty_input",
            Error::OutsideHarmonicRegime { .. } => "outside_harmonic_regime",
            Error::Diverged(_) => "diverged",
            Error::UnknownScenario(_) => "unknown_scenario",
            Error::Trial { .. } => "trial",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
