use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-finite value in column `{column}` at row {row}")]
    NonFinite { column: String, row: usize },

    #[error("cannot parse `{value}` in column `{column}` at row {row}")]
    Parse {
        column: String,
        row: usize,
        value: String,
    },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("zero-variance column `{0}`")]
    ZeroVariance(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("separation suspected: |linear predictor| = {magnitude:.1} exceeds the separation limit at row {row}")]
    Separation { row: usize, magnitude: f64 },

    #[error("non-finite loss encountered during optimization")]
    NonFiniteLoss,

    #[error("extreme weight: fitted probability {prob:e} of treatment {treatment} at row {row}")]
    ExtremeWeight {
        row: usize,
        treatment: usize,
        prob: f64,
    },

    #[error("cross-validation folding failed: {0}")]
    Folding(String),

    #[error("monte carlo harness: {failed} of {total} replications failed")]
    TooManyFailures { failed: usize, total: usize },
}

impl Error {
    /// True for failures that originate in the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Separation { .. }
                | Error::NonFiniteLoss
                | Error::ExtremeWeight { .. }
                | Error::TooManyFailures { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
