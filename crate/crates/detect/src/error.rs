use thiserror::Error;

pub type Result<T> = std::result::Result<T, DetectError>;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("no samples")]
    Empty,

    #[error("feature shape mismatch: {0}")]
    Shape(String),

    #[error("label {0} is not 0 or 1")]
    Label(u8),

    #[error("need samples of both classes, got {negatives} of class 0 and {positives} of class 1")]
    SingleClass { negatives: usize, positives: usize },

    #[error("cannot split into {folds} folds: smallest class has {min_class} samples")]
    Folds { folds: usize, min_class: usize },

    #[error("invalid parameter: {0}")]
    Param(String),
}
