use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: {0}")]
    InputTooShort(String),
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("segment too short: need {needed} frames, got {got}")]
    SegmentTooShort { needed: usize, got: usize },
    #[error("segment shorter than receptive field: need {needed} frames, got {got}")]
    ShorterThanReceptiveField { needed: usize, got: usize },
    #[error("channel count must be even, got {0}")]
    OddChannels(usize),
    #[error("loss must be scalar, got {0} elements")]
    NonScalarLoss(usize),
    #[error("invalid label {label} for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("degenerate feature vector at row {0}")]
    DegenerateFeature(usize),
    #[error("degenerate embedding")]
    DegenerateEmbedding,
    #[error("no triplets")]
    NoTriplets,
    #[error("insufficient positives: no speaker has two embeddings")]
    InsufficientPositives,
    #[error("degenerate trial set: {0}")]
    DegenerateTrials(String),
    #[error("no trials")]
    NoTrials,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("utterance shorter than minimum segment: need {needed} frames, got {got}")]
    UtteranceTooShort { needed: usize, got: usize },
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
