use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("step size underflow at t = {t:.6e} (stiff blow-up); last valid state kept")]
    StepSizeUnderflow { t: f64 },

    #[error("step budget {max_steps} exhausted at t = {t:.6e}")]
    MaxStepsExceeded { t: f64, max_steps: usize },

    #[error(
        "jacobian of the prestabilized dynamics is singular at the equilibrium; \
         the sensitivity asymptote is undefined (linearization inconclusive)"
    )]
    SingularJacobian,

    #[error("closed-loop linearization is not Hurwitz (max Re lambda = {max_re:.3e})")]
    NotHurwitz { max_re: f64 },

    #[error("constraint row {row} is not affine in (x, v): residual {residual:.3e}")]
    NonAffineConstraint { row: usize, residual: f64 },

    #[error("constraint row {row} has a zero normal; it cannot carry a terminal margin")]
    ZeroConstraintNormal { row: usize },

    #[error("initial margin negative: Delta(x0, v0) = {margin:.6e}")]
    StartupInfeasible { margin: f64 },

    #[error("QP solve failed ({status}); offending problem:\n{problem_json}")]
    QpFailure { status: &'static str, problem_json: String },

    #[error("unknown model name {0:?}")]
    UnknownModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
