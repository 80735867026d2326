use pfqr_core::evalbench::BenchError;
use pfqr_core::extract::ExtractError;
use pfqr_core::fgrid::FgridError;
use pfqr_core::io::IoError;
use pfqr_core::model::ModelError;
use pfqr_core::simgen::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{failures} replication fit(s) failed; report written to {out}")]
    Partial { failures: usize, out: String },
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Partial { .. } => 3,
            CliError::Mismatch(_) => 4,
        }
    }
}

/// Input files: unreadable or malformed inputs are configuration errors.
impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Config(e.to_string())
    }
}

pub fn write_failed(e: IoError) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<FgridError> for CliError {
    fn from(e: FgridError) -> Self {
        match e {
            FgridError::GridMismatch { .. } | FgridError::DimensionMismatch(_) => CliError::Mismatch(e.to_string()),
            FgridError::TooFewPoints(_) | FgridError::NonUniform | FgridError::NonFinite(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Grid(g) => g.into(),
            ModelError::ScalarMismatch { .. } => CliError::Mismatch(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ExtractError> for CliError {
    fn from(e: ExtractError) -> Self {
        match e {
            ExtractError::Grid(g) => g.into(),
            ExtractError::InvalidConfig(_) | ExtractError::MissingResponses => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Grid(g) => g.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}
