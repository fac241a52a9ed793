use std::path::PathBuf;

use leadtwin::control::ControlError;
use leadtwin::ecm::EcmError;
use leadtwin::ekf::EkfError;
use leadtwin::fit::FitError;
use leadtwin::sim::SimError;
use leadtwin::trace::TraceError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flag combination or value caught before any work starts.
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Trace { path: PathBuf, source: TraceError },
    #[error("{path}: {source}")]
    Input { path: PathBuf, source: EcmError },
    #[error(transparent)]
    Model(#[from] EcmError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Ekf(#[from] EkfError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl CliError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "E_USAGE",
            CliError::Io { .. } => "E_IO",
            CliError::Trace { .. } => "E_TRACE",
            CliError::Input { .. } => "E_INPUT",
            CliError::Model(_) | CliError::Sim(SimError::Model(_)) => "E_MODEL",
            CliError::Fit(_) => "E_FIT",
            CliError::Ekf(_) | CliError::Sim(SimError::Estimator(_)) => "E_EKF",
            CliError::Control(_) | CliError::Sim(SimError::Control(_)) => "E_CONTROL",
            CliError::Sim(SimError::SocExhausted { .. }) => "E_SOC_EXHAUSTED",
            CliError::Sim(SimError::Parse(_)) => "E_SCENARIO_PARSE",
            CliError::Sim(SimError::InvalidScenario(_)) => "E_SCENARIO",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// `error code=E_X: message` on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error code={}: {msg}", self.code())
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
