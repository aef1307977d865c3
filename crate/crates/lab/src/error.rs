use sheaf_core::model::TrainError;
use sheaf_core::Error;

/// Command failure, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    /// A precondition, postcondition or input check failed.
    #[error("{0}")]
    Contract(String),
    /// An enumeration or size guard refused the work.
    #[error("{0}")]
    Budget(String),
    #[error("{0}")]
    Io(String),
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Budget(_) => 2,
            LabError::Contract(_) | LabError::Io(_) => 1,
        }
    }
}

impl From<Error> for LabError {
    fn from(e: Error) -> Self {
        match e {
            Error::BudgetExceeded { .. } => LabError::Budget(e.to_string()),
            Error::RunFailed { ref source, .. } if matches!(**source, Error::BudgetExceeded { .. }) => {
                LabError::Budget(e.to_string())
            }
            other => LabError::Contract(other.to_string()),
        }
    }
}

impl From<TrainError> for LabError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Setup(inner) => inner.into(),
            other => LabError::Contract(other.to_string()),
        }
    }
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::Contract(format!("malformed JSON: {e}"))
    }
}

impl From<csv::Error> for LabError {
    fn from(e: csv::Error) -> Self {
        LabError::Io(e.to_string())
    }
}
