use thiserror::Error;

/// Errors raised by the flow, spectral and curvature machinery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("{what} is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { what: String, asymmetry: f64 },

    #[error("{what} is not positive definite: eigenvalue #{index} = {eigenvalue:.6e}")]
    NotPositiveDefinite {
        what: String,
        index: usize,
        eigenvalue: f64,
    },

    #[error("time must be non-negative, got {0}")]
    NegativeTime(f64),

    #[error("t = {t} is outside table range [{lo}, {hi}]")]
    OutsideTableRange { t: f64, lo: f64, hi: f64 },

    #[error("quadrature underflow: every weight vanished (max exponent {max_exponent:.3e}); increase the quadrature order")]
    QuadratureUnderflow { max_exponent: f64 },

    #[error("e^(-V0) is not integrable against the Gaussian kernel at this point ({0})")]
    NotIntegrable(String),

    #[error("flow time too large for this resolution: smallest eigenvalue of C_inf - C_t is {eigenvalue:.3e} at t = {t}")]
    FlowTimeTooLarge { t: f64, eigenvalue: f64 },

    #[error("s = {s} > t = {t}")]
    TimesOutOfOrder { s: f64, t: f64 },

    #[error("convolution kernel wider than box (kernel sd {kernel_sd:.3e}, box half-width {half_width:.3e}); use a larger box")]
    KernelWiderThanBox { kernel_sd: f64, half_width: f64 },

    #[error("box too large / resolution too coarse: weight underflows at {fraction:.1}% of nodes")]
    WeightUnderflow { fraction: f64 },

    #[error("eigensolver did not converge after {iterations} iterations; residual norms {residuals:?}")]
    EigenNotConverged {
        iterations: usize,
        residuals: Vec<f64>,
    },

    #[error("degenerate test function: variance {0:.3e} after centering")]
    DegenerateTestFunction(f64),

    #[error("support too large for Gamma_2 check: weighted boundary mass {0:.3e}")]
    SupportTooLarge(f64),

    #[error("bound divergent: curvature floor {0:.3e} does not make e^(-2 lambda_t) integrable")]
    BoundDivergent(f64),

    #[error("empty sample set")]
    EmptySamples,

    #[error("time grid is not strictly increasing at index {0}")]
    NonMonotoneGrid(usize),

    #[error("missing trace point at t = {0}")]
    MissingTracePoint(f64),

    #[error("MCMC did not converge: effective sample size {ess:.0} < {required}")]
    McmcNotConverged { ess: f64, required: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
