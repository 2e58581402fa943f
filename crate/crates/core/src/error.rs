use thiserror::Error;

/// Errors raised by the model, reduction and equilibrium layers.
///
/// Numeric payloads are carried as `f64` so the error type is shared by every
/// scalar instantiation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error(
        "PLL algebraic loop is singular: 1 - k_p,pll*L_g/w_s*i_d = {denominator:.3e} \
         (requires i_d < 1/(w_pll*L_g/w_s) = {i_d_bound:.6}, got i_d = {i_d:.6})"
    )]
    PllLoopSingular {
        denominator: f64,
        i_d: f64,
        i_d_bound: f64,
    },

    #[error(
        "fast PLL equilibrium does not exist: |X_g*i_d| = {lhs:.6} exceeds U_g = {u_g:.6} \
         (requires i_d < U_g/X_g)"
    )]
    PllFastNoSolution { lhs: f64, u_g: f64 },

    #[error("fast DVC reduction invalid: cos(delta) = {cos_delta:.3e} is not above {tolerance:.1e}")]
    DvcFastInvalid { cos_delta: f64, tolerance: f64 },

    #[error("reduced PLL dynamics singular: lambda(delta) = {lambda:.3e} at delta = {delta:.6} rad")]
    LambdaSingular { lambda: f64, delta: f64 },

    #[error("argument outside the domain of {function}: {detail}")]
    Domain {
        function: &'static str,
        detail: String,
    },

    #[error(
        "no equilibrium: {detail} (existence threshold U_g > sqrt(2*P_in*X_g) = {threshold:.4})"
    )]
    NoEquilibrium { detail: String, threshold: f64 },

    #[error("root finder did not converge on [{lo:.6e}, {hi:.6e}] after {iterations} iterations (f(lo) = {f_lo:.3e}, f(hi) = {f_hi:.3e})")]
    RootNotConverged {
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
        iterations: usize,
    },

    #[error("Newton iteration did not converge: residual max-norm {residual:.3e} after {iterations} iterations")]
    NewtonNotConverged { residual: f64, iterations: usize },

    #[error("point is not an equilibrium: residual max-norm {residual:.3e}")]
    NotAnEquilibrium { residual: f64 },

    #[error("equilibrium is not a saddle: eigenvalues {eigenvalues}")]
    NotASaddle { eigenvalues: String },

    #[error("boundary-layer quadrature did not converge within tau_max = {tau_max:.3e} s (remaining deviation {remaining:.3e})")]
    QuadratureNotConverged { tau_max: f64, remaining: f64 },

    #[error("{0}")]
    Scenario(String),

    #[error("clearing-time bracket invalid: {detail}")]
    CctBracket { detail: String },

    #[error("{0}")]
    Roa(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
