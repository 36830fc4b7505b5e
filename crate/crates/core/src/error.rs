use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {lhs} vs {rhs} ({context})")]
    ShapeMismatch {
        lhs: Shape,
        rhs: Shape,
        context: &'static str,
    },

    #[error("invalid shape {shape}: {reason}")]
    InvalidShape { shape: Shape, reason: String },

    #[error("division by exact zero")]
    DivisionByZero,

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("empty reduction span: {0}")]
    EmptyReduction(String),

    #[error("group count {groups} does not divide channel count {channels}")]
    GroupMismatch { groups: usize, channels: usize },

    #[error("batch norm needs at least two values per channel, got N*H*W = {0}")]
    DegenerateBatch(usize),

    #[error("loss must be a scalar of shape (1,1,1,1), got {0}")]
    NonScalarLoss(Shape),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("mask is not binary: found value {0}")]
    NonBinaryMask(f64),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("every run failed: {0}")]
    AllRunsFailed(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad input or configuration, as opposed to
    /// a run that started and then failed.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Diverged { .. }
                | Error::NonFiniteGradient(_)
                | Error::AllRunsFailed(_)
                | Error::NonFinite(_)
                | Error::Io(_)
        )
    }
}
