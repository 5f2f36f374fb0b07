use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scenario notation {0:?}: expected \"B-I\" with positive integers")]
    Notation(String),

    #[error(
        "scenario {base}-{increment} does not fit {num_classes} classes: \
         {num_classes} - {base} is not a positive multiple of {increment}"
    )]
    ScenarioRemainder {
        base: usize,
        increment: usize,
        num_classes: usize,
    },

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("step {step} is outside 1..={num_steps}")]
    StepOutOfRange { step: usize, num_steps: usize },

    #[error("step {step} has no training samples under this scenario")]
    EmptyStep { step: usize },

    #[error("dataset cannot satisfy coverage: {0}")]
    Coverage(String),

    #[error("invalid proposal request: {0}")]
    Proposals(String),

    #[error("mask has {count} connected components, more than max_n = {max_n}")]
    TooManyComponents { count: usize, max_n: usize },

    #[error("proposals do not partition the image: pixel ({row}, {col}) is covered {count} times")]
    Partition { row: usize, col: usize, count: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class {0} is already registered")]
    DuplicateClass(u8),

    #[error("label {label} at pixel ({row}, {col}) is not an annotated class")]
    UnexpectedLabel { label: u8, row: usize, col: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid loss arguments: {0}")]
    LossContract(String),

    #[error("memory capacity {capacity} is smaller than the {seen} seen classes")]
    MemoryCapacity { capacity: usize, seen: usize },

    #[error("no memory candidate contains seen class {0}")]
    MemoryUncoverable(u8),

    #[error("training diverged at step {step}, epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged {
        step: usize,
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("metrics missing for run {}", .0.display())]
    MissingMetrics(PathBuf),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
