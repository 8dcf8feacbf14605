use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown model `{name}`; valid names: {}", valid.join(", "))]
    UnknownModel { name: String, valid: Vec<String> },

    #[error("unknown test function `{0}`")]
    UnknownTestFunction(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{coefficient} is not finite at x = {point:?}")]
    NonFinite {
        coefficient: &'static str,
        point: Vec<f64>,
    },

    #[error("state became non-finite at knot {knot}")]
    NonFiniteState { knot: usize },

    #[error("initial density vanishes on the grid (radius {radius}); try a larger radius")]
    EmptyInitialDensity { radius: f64 },

    #[error("diffusion is not uniformly elliptic at node {node} (x = {point:?}): min eigenvalue {min_eigenvalue} < {lambda}")]
    EllipticityViolated {
        node: usize,
        point: Vec<f64>,
        min_eigenvalue: f64,
        lambda: f64,
    },

    #[error("linear solve failed after {iterations} iterations (relative residual {residual:e})")]
    SolverFailed { iterations: usize, residual: f64 },

    #[error("singular tridiagonal system at row {row}")]
    SingularSystem { row: usize },

    #[error("propagation produced non-finite values")]
    NonFiniteField,

    #[error("density mass collapsed at knot {knot} (mantissa mass {mass:e})")]
    MassCollapse { knot: usize, mass: f64 },

    #[error("clamped negative mass at knot {knot} is {ratio:e} of field mass (tolerance {tolerance:e})")]
    ClampTolerance {
        knot: usize,
        ratio: f64,
        tolerance: f64,
    },

    #[error("field has zero mass")]
    ZeroMass,

    #[error("model `{0}` has no linear-Gaussian structure")]
    NotLinear(String),

    #[error("initial sampler gave up after {0} rejection attempts")]
    SamplerExhausted(usize),

    #[error("malformed path data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::Error::InvalidArgument(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
