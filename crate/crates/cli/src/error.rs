use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Schema(String),

    #[error("invalid sweep axis: {0}")]
    InvalidAxis(String),

    #[error("hypotheses failed in strict mode: {0}")]
    Hypothesis(String),

    #[error("numerical failure in {experiment}: {source}")]
    Numerical {
        experiment: &'static str,
        source: greenlab::Error,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) | CliError::InvalidAxis(_) => 2,
            CliError::Hypothesis(_) => 3,
            CliError::Numerical { .. } => 4,
            CliError::Io(_) => 1,
        }
    }

    /// Maps a library error raised while running `experiment`.
    pub fn from_core(experiment: &'static str, e: greenlab::Error) -> Self {
        use greenlab::Error as E;
        match e {
            E::SolveDiverged { .. }
            | E::NonFinite { .. }
            | E::SingularAssembly(_)
            | E::Overflow { .. }
            | E::DegenerateFit(_)
            | E::NoSamples(_)
            | E::ZeroDenominator(_) => CliError::Numerical { experiment, source: e },
            other => CliError::Schema(format!("{experiment}: {other}")),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
