use std::fmt;

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or arguments (exit 1).
    Usage(String),
    /// Unreadable, malformed or infeasible input data (exit 2).
    Data(anyhow::Error),
    /// A result failed one of its own consistency checks (exit 3).
    Invariant(String),
}

impl CliError {
    pub fn data(msg: impl fmt::Display) -> Self {
        CliError::Data(anyhow::anyhow!("{msg}"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(e) => write!(f, "data error: {e:#}"),
            CliError::Invariant(m) => write!(f, "invariant violated: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.into())
            }
        }
    )*};
}

data_errors!(
    rld_core::topology::TopologyError,
    rld_core::tripledata::TripleDataError,
    rld_core::neuralnet::NnError,
    rld_core::fedlearn::FlError,
    rld_core::ledger::LedgerError,
    rld_core::analysis::AnalysisError,
    rld_core::analysis::CostError,
    serde_json::Error
);
