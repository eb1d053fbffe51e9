use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing configuration key `{key}` in section [{section}]")]
    MissingKey { section: String, key: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// A loss component evaluated to NaN or infinity during training.
    #[error("non-finite loss component `{component}` (value {value})")]
    NonFinite { component: &'static str, value: f64 },

    #[error("unknown sample id {0}")]
    UnknownId(u64),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}
