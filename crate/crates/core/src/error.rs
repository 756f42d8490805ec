use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid environment spec: {0}")]
    InvalidEnv(String),

    #[error("episode already complete (step {step} of horizon {horizon})")]
    EpisodeComplete { step: usize, horizon: usize },

    #[error("operation `{op}` is not defined for environment `{env}`")]
    UnsupportedEnv { op: &'static str, env: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("diffusion time {t} outside [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("primitive `{0}` has no gradient")]
    UnsupportedPrimitive(&'static str),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
