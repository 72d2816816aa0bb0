//! GGO severity grading experiment harness.

pub mod cli;
pub mod evaluator;
pub mod gridrunner;
pub mod ingest;
pub mod model_zoo;
pub mod preprocess;
pub mod severity;
pub mod synthkit;
pub mod trainer;

pub use severity::{Severity, NUM_CLASSES};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error(transparent)]
    Preprocess(#[from] preprocess::PreprocessError),
    #[error(transparent)]
    Model(#[from] model_zoo::ModelError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Eval(#[from] evaluator::EvalError),
    #[error(transparent)]
    Grid(#[from] gridrunner::GridError),
    #[error(transparent)]
    Synth(#[from] synthkit::SynthError),
    #[error("{0}")]
    Integrity(String),
    #[error("{0}")]
    Run(String),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Ingest(_) => "ingest",
            Error::Preprocess(_) => "preprocess",
            Error::Model(_) => "model",
            Error::Train(_) => "train",
            Error::Eval(_) => "eval",
            Error::Grid(_) => "grid",
            Error::Synth(_) => "synth",
            Error::Integrity(_) => "integrity",
            Error::Run(_) => "run",
            Error::Usage(_) => "usage",
        }
    }
}
