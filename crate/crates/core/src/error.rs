use std::path::PathBuf;

/// Errors produced anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("prompt contains no semantic units")]
    EmptyPrompt,

    #[error("sum of unit offsets is degenerate (norm {0:e})")]
    DegenerateSum(f64),

    #[error("sample has zero norm")]
    ZeroSample,

    #[error("invalid semantic unit: {0}")]
    InvalidUnit(String),

    #[error("invalid task request: {0}")]
    InvalidRequest(String),

    #[error("diffusion step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("non-finite loss ({0})")]
    NonFiniteLoss(f64),

    #[error("condition sets are inconsistent: combined must equal previous ∪ new")]
    InconsistentConditionSets,

    #[error("DDIM step must move to an earlier timestep (from {from} to {to})")]
    StepOrderViolation { from: usize, to: usize },

    #[error("arrival schedule never delivers a unit")]
    EmptySchedule,

    #[error("invalid arrival schedule: {0}")]
    InvalidSchedule(String),

    #[error("the first phase must select at least one unit")]
    EmptyFirstPhase,

    #[error("every action is masked in this state")]
    NoValidAction,

    #[error("all logits are masked")]
    AllMasked,

    #[error("action {0} is masked in this state")]
    InvalidAction(usize),

    #[error("episode already finished")]
    EpisodeFinished,

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigInvalid(_) | Error::Json(_) => 2,
            Error::MissingCheckpoint(_) => 3,
            Error::NonFiniteLoss(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
