use thiserror::Error;

/// Errors produced by the imputation library.
///
/// The variants split into two families used by the CLI to pick an exit
/// code: configuration and input problems (`exit code 1`) versus numerical
/// failures encountered while sampling (`exit code 2`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A Gram matrix inside a conditional draw was numerically singular.
    #[error("singular design in {op}: {detail}")]
    SingularDesign { op: &'static str, detail: String },

    /// A latent component collapsed to zero norm and cannot be rescaled.
    #[error("degenerate component {index}: {detail}")]
    DegenerateComponent { index: usize, detail: String },

    #[error("numerical failure in {op}: {detail}")]
    NumericalFailure { op: &'static str, detail: String },

    /// A draw-level error annotated with the sweep it occurred in.
    #[error("chain iteration {iteration}: {source}")]
    ChainIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("validation split failed after {attempts} attempts: {detail}")]
    SplitFailed { attempts: usize, detail: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("archive format: {0}")]
    ArchiveFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Attach the sweep index to an error bubbling out of a chain.
    pub fn at_iteration(self, iteration: usize) -> Error {
        Error::ChainIteration {
            iteration,
            source: Box::new(self),
        }
    }

    /// Process exit code the CLI maps this error to: 1 for usage or input
    /// problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::InvalidInput(_)
            | Error::ArchiveFormat(_)
            | Error::Io(_)
            | Error::Csv(_) => 1,
            Error::SingularDesign { .. }
            | Error::DegenerateComponent { .. }
            | Error::NumericalFailure { .. }
            | Error::SplitFailed { .. }
            | Error::UndefinedMetric(_) => 2,
            Error::ChainIteration { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
