use thiserror::Error;

pub type Result<T> = std::result::Result<T, ScbError>;

#[derive(Debug, Error)]
pub enum ScbError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Rejection sampling ran out of attempts; `constraint` is the check that failed most often.
    #[error("generation failed after {tries} tries (most frequent failure: {constraint})")]
    Generation { constraint: String, tries: usize },

    #[error("power iteration did not converge: {0}")]
    Convergence(String),

    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    #[error("rounding failed: column {column} has no entry above the cutoff {cutoff}")]
    Rounding { column: usize, cutoff: f64 },

    #[error("divergence at step {step}: max |V| = {norm:e}")]
    Divergence { step: usize, norm: f64 },

    #[error("transfer infeasible: <P_hat, P>_mu - |mu|^2 = {margin:.4e} is below |mu|^2 = {required:.4e}; increase gamma")]
    TransferInfeasible { margin: f64, required: f64 },

    #[error("first transfer step failed: alpha_A / alpha_V = {ratio:.4} outside [{lo:.3}, {hi:.3}]; use a larger first-step batch or a larger theta")]
    FirstStep { ratio: f64, lo: f64, hi: f64 },

    #[error("enumeration budget exceeded: {needed} outcomes > {max}")]
    Budget { needed: u128, max: u128 },

    #[error("closed form disagrees with enumeration for {lemma}: max |diff| = {diff:e}")]
    FormulaMismatch { lemma: String, diff: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config: {0}")]
    Config(String),
}

impl ScbError {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        ScbError::Dimension {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScbError::Divergence { .. } => 3,
            ScbError::Io(_) => 1,
            _ => 2,
        }
    }
}
