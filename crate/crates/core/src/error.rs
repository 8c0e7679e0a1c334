use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("prompt id {0} already exists with different content")]
    DuplicateIdConflict(String),
    #[error("malformed record at line {line}: {message}")]
    SchemaError { line: usize, message: String },
    #[error("unknown prompt {0}")]
    UnknownPrompt(String),
    #[error("gold conflict for prompt {0}: already registered with a different spec")]
    GoldConflict(String),
    #[error("eligible pool has {available} prompts, batch needs {required}")]
    InsufficientCorpus { available: usize, required: usize },
    #[error("need {required} {phase}-test gold prompts, corpus has {available}")]
    InsufficientGold {
        phase: &'static str,
        available: usize,
        required: usize,
    },
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} is not active")]
    SessionNotActive(String),
    #[error("user {user_id} already voted on prompt {prompt_id}")]
    DuplicateVote { user_id: String, prompt_id: String },
    #[error("prompt {prompt_id} is not at the session cursor (expected {expected})")]
    OutOfOrderVote { prompt_id: String, expected: String },
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("export salt must not be empty")]
    EmptySalt,
    #[error("score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("score provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("missing ground truth for prompt {0}")]
    MissingGroundTruth(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, used for API error bodies and CLI output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DuplicateIdConflict(_) => "DuplicateIdConflict",
            Error::SchemaError { .. } => "SchemaError",
            Error::UnknownPrompt(_) => "UnknownPrompt",
            Error::GoldConflict(_) => "GoldConflict",
            Error::InsufficientCorpus { .. } => "InsufficientCorpus",
            Error::InsufficientGold { .. } => "InsufficientGold",
            Error::UnknownSession(_) => "UnknownSession",
            Error::SessionNotActive(_) => "SessionNotActive",
            Error::DuplicateVote { .. } => "DuplicateVote",
            Error::OutOfOrderVote { .. } => "OutOfOrderVote",
            Error::UnknownUser(_) => "UnknownUser",
            Error::EmptySalt => "EmptySalt",
            Error::ScoreOutOfRange(_) => "ScoreOutOfRange",
            Error::ProviderUnavailable(_) => "ProviderUnavailable",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::DegenerateDataset(_) => "DegenerateDataset",
            Error::MissingGroundTruth(_) => "MissingGroundTruth",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::InvalidCheckpoint(_) => "InvalidCheckpoint",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
