use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("batch length mismatch: {what} has {got} rows, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid action id {action} (action count {action_count})")]
    InvalidAction { action: u32, action_count: usize },
    #[error("invalid observation code {0}")]
    InvalidObservation(u32),
    #[error("index {index} out of range for {table} table with {len} rows")]
    InvalidIndex {
        table: &'static str,
        index: u32,
        len: usize,
    },
    #[error("action node {0} has no recorded visits")]
    UnvisitedAction(u32),
    #[error("action node {0} has no valued child belief")]
    MissingChildValue(u32),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("enumeration capacity exceeded: {0}")]
    Capacity(String),
    #[error("observation {observation} has zero probability under the current belief")]
    ImpossibleEvidence { observation: u32 },
    #[error("malformed debug table: {0}")]
    Parse(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T, E = PlanError> = std::result::Result<T, E>;

impl From<std::io::Error> for PlanError {
    fn from(e: std::io::Error) -> Self {
        PlanError::Io(e.to_string())
    }
}
