use thiserror::Error;
use weaksup_autograd::AutogradError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{what}: {msg}")]
    Parse { what: &'static str, msg: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("input of {frames} frames is shorter than the minimum of {min}")]
    TooShort { frames: usize, min: usize },
    #[error("decoder block requires encoder state")]
    MissingEncoderState,
    #[error("no CTC alignment: {frames} frames cannot emit {required} labels")]
    NoAlignment { frames: usize, required: usize },
    #[error("instance too large for brute force: {0}")]
    TooLarge(String),
    #[error("training diverged in {phase} at step {step}: {reason}")]
    Divergence {
        phase: &'static str,
        step: usize,
        reason: String,
    },
    #[error("empty {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn parse(what: &'static str, msg: impl Into<String>) -> Self {
        Self::Parse {
            what,
            msg: msg.into(),
        }
    }
}
