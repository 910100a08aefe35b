use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use stark_tomo::electrostatics::SolveError;
use stark_tomo::grid::GridError;
use stark_tomo::microwave::MicrowaveError;
use stark_tomo::reconstruction::ReconError;
use stark_tomo::spectroscopy::SpectroError;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration, or inputs that contradict it.
    #[error("config error: {0}")]
    Config(String),
    #[error("convergence failure: {0}")]
    Convergence(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{failed} of {total} acceptance checks failed")]
    ChecksFailed { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ChecksFailed { .. } => 1,
            CliError::Config(_) => 2,
            CliError::Convergence(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::ChecksFailed { .. } => "checks_failed",
            CliError::Config(_) => "config",
            CliError::Convergence(_) => "convergence",
            CliError::Io(_) => "io",
        }
    }

    /// One-line JSON report for stderr.
    pub fn report(&self, command: &str) -> String {
        #[derive(Serialize)]
        struct Report<'a> {
            error: &'a str,
            exit_code: i32,
            command: &'a str,
            message: String,
        }
        serde_json::to_string(&Report {
            error: self.kind(),
            exit_code: self.exit_code(),
            command,
            message: self.to_string(),
        })
        .expect("report serialises")
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::Io { .. } | GridError::Parse { .. } => CliError::Io(e.to_string()),
            GridError::InvalidSpec(_) | GridError::SpecMismatch(_) | GridError::AllMasked => {
                CliError::Config(e.to_string())
            }
        }
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::NotConverged { .. } => CliError::Convergence(e.to_string()),
            SolveError::Geometry(_) | SolveError::Settings(_) => CliError::Config(e.to_string()),
            SolveError::Cache(_) => CliError::Io(e.to_string()),
            SolveError::Grid(g) => g.into(),
        }
    }
}

impl From<SpectroError> for CliError {
    fn from(e: SpectroError) -> Self {
        match e {
            SpectroError::Io { .. } | SpectroError::Parse { .. } => CliError::Io(e.to_string()),
            SpectroError::Detunings(_) | SpectroError::Stack(_) => CliError::Config(e.to_string()),
            SpectroError::Grid(g) => g.into(),
        }
    }
}

impl From<ReconError> for CliError {
    fn from(e: ReconError) -> Self {
        match e {
            ReconError::ChargeFit(_) => CliError::Convergence(e.to_string()),
            ReconError::Grid(g) => g.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<MicrowaveError> for CliError {
    fn from(e: MicrowaveError) -> Self {
        match e {
            MicrowaveError::Io { .. } | MicrowaveError::Parse { .. } => CliError::Io(e.to_string()),
            MicrowaveError::Grid(g) => g.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}
