use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("no samples for state-action pair ({state}, {action})")]
    MissingSamples { state: usize, action: usize },

    #[error("value iteration did not reach residual {tol:e} within {iterations} sweeps (last residual {residual:e})")]
    ConvergenceFailure {
        tol: f64,
        iterations: usize,
        residual: f64,
    },

    #[error("Lipschitz constant {lipschitz} is below R/(1-gamma) = {minimum}")]
    InvalidLipschitz { lipschitz: f64, minimum: f64 },

    #[error("interval is infeasible: derived epsilon {epsilon} must be positive")]
    InfeasibleInterval { epsilon: f64 },

    #[error("non-finite value in {0}")]
    NumericalFailure(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("point cloud is degenerate")]
    DegenerateCloud,

    #[error("base coverage volume is zero")]
    DegenerateBase,

    #[error("control cost is not positive definite")]
    InvalidCost,

    #[error("planner failure: {0}")]
    PlannerFailure(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }
}
