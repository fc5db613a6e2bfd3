use thiserror::Error;

pub type Result<T> = std::result::Result<T, NdError>;

#[derive(Debug, Error)]
pub enum NdError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batchnorm over an empty batch")]
    EmptyBatch,
    #[error("contrastive margin must be positive or zero, got {0}")]
    BadMargin(f64),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint fingerprint {found:#018x} does not match expected {expected:#018x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(NdError::Shape {
        op,
        detail: detail.into(),
    })
}
