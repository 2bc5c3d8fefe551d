use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical stability: t = {t} is below the floor delta = {delta}")]
    Stability { t: f64, delta: f64 },

    #[error("time ordering violated: expected s < t, got s = {s}, t = {t}")]
    Ordering { t: f64, s: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(
        "non-finite loss at step {step}: loss_img = {loss_img}, loss_txt = {loss_txt}, loss_joint = {loss_joint}"
    )]
    NonFiniteLoss {
        step: u64,
        loss_img: f64,
        loss_txt: f64,
        loss_joint: f64,
    },

    #[error("non-finite model output at sampling step {step}")]
    NonFiniteOutput { step: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
