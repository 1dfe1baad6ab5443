use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular point: {0}")]
    Singularity(String),

    #[error("contrast branch error: eps_R = {eps_r} <= sin^2(theta_i) = {sin2}")]
    Branch { eps_r: f64, sin2: f64 },

    #[error("scatterer {index} does not lie inside the domain of interest")]
    OutsideDomain { index: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("solver did not converge after {iterations} iterations (last relative residual {last_residual:e})")]
    NoConvergence {
        iterations: usize,
        last_residual: f64,
        history: Vec<f64>,
    },

    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("matrix is singular (pivot {pivot})")]
    SingularMatrix { pivot: usize },

    #[error("degenerate link: incident field magnitude is zero")]
    DegenerateLink,

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("series oracle did not converge: tail {tail:e} relative to partial sum")]
    Oracle { tail: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at epoch {epoch}, step {step}: {diagnostics}")]
    NanLoss {
        epoch: usize,
        step: usize,
        diagnostics: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
