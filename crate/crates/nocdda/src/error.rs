//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid shape in {context}: {reason}")]
    InvalidShape {
        context: &'static str,
        reason: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("loss must be scalar, got {len} elements")]
    NonScalarLoss { len: usize },

    #[error("non-finite gradient in layer {layer}; step rejected")]
    NonFiniteGradient { layer: usize },

    #[error("training diverged in {stage} at epoch {epoch} (non-finite loss)")]
    TrainingDiverged {
        stage: &'static str,
        epoch: usize,
        trace: Vec<f64>,
    },

    #[error("probability vector not normalized (sum deviates by {deviation:.3e})")]
    NotNormalized { deviation: f64 },

    #[error("time step {t} out of range [0, {max}]")]
    TimeStepOutOfRange { t: usize, max: usize },

    #[error("invalid step order: t={t} must exceed t_prev={t_prev}")]
    StepOrder { t: usize, t_prev: usize },

    #[error("no samples pseudo-labeled as class {class_id}; cannot estimate prior")]
    EmptyClassSubset { class_id: usize },

    #[error("sample {index} became non-finite at step t={t}; aborted")]
    SampleDiverged { index: usize, t: usize },

    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("unknown tag {value:?} in column {column} at line {line}")]
    UnknownTag {
        column: &'static str,
        value: String,
        line: usize,
    },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Tag an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
