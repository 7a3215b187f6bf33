use fairtransfer::harness::HarnessError;
use fairtransfer::objectives::ObjectiveError;
use fairtransfer::training::TrainError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Verdict(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Runtime(_) => "runtime",
            CliError::Verdict(_) => "verdict",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) | CliError::Verdict(_) => 4,
        }
    }

    pub fn to_json(&self) -> String {
        json!({
            "error": {
                "kind": self.kind(),
                "code": self.exit_code(),
                "message": self.to_string(),
            }
        })
        .to_string()
    }

    /// Prints the error as JSON on stderr and returns its exit code.
    pub fn exit(&self) -> std::process::ExitCode {
        eprintln!("{}", self.to_json());
        std::process::ExitCode::from(self.exit_code() as u8)
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        let msg = e.to_string();
        match e {
            HarnessError::Config(_)
            | HarnessError::Objective(ObjectiveError::Spec(_))
            | HarnessError::Train(TrainError::Config(_)) => CliError::Config(msg),
            HarnessError::Data(_) | HarnessError::Io { .. } => CliError::Data(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

impl From<fairtransfer::data::DataError> for CliError {
    fn from(e: fairtransfer::data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}
