use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown outcome `{0}`")]
    UnknownOutcome(String),

    #[error("design matrix is rank deficient; collinear columns: {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("too few observations: {rows} rows for {params} parameters")]
    TooFewRows { rows: usize, params: usize },

    #[error("need at least two clusters for clustered inference, found {0}")]
    TooFewClusters(usize),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("lasso did not converge after {sweeps} sweeps (max KKT violation {max_kkt_violation:.3e})")]
    NoConvergence { sweeps: usize, max_kkt_violation: f64 },

    #[error("perfect separation in logistic model ({0})")]
    Separation(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("missing ledger for arm {0}")]
    MissingLedger(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
