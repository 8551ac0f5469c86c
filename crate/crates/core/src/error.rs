use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {kernel}: {left:?} vs {right:?}")]
    Dimension {
        kernel: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("division guard in {kernel}: denominator {value:e} at index {index} is below 1e-12 in magnitude")]
    DivisionGuard {
        kernel: &'static str,
        index: usize,
        value: f64,
    },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint error in field `{field}`: {message}")]
    Checkpoint { field: String, message: String },

    #[error("training diverged at iteration {iteration}: non-finite loss (lr_theta = {lr_theta}, lr_omega = {lr_omega})")]
    Divergence {
        iteration: usize,
        lr_theta: f64,
        lr_omega: f64,
    },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for this error. Input problems (bad files, bad
    /// config, shape mismatches in user data) exit with 2, runtime failures
    /// with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Format(_)
            | Error::Config(_)
            | Error::Checkpoint { .. }
            | Error::Data(_)
            | Error::Dimension { .. } => 2,
            _ => 1,
        }
    }
}
