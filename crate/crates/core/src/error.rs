use thiserror::Error;

/// Errors raised by the cavity model, the numerical kernels and the fits.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no root in bracket [{lo:.17e}, {hi:.17e}] (f(lo) = {f_lo:.3e}, f(hi) = {f_hi:.3e})")]
    RootNotFound {
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("division guard: {0}")]
    Division(String),

    #[error("singular transfer matrix: {0}")]
    Singular(String),

    #[error("branch discontinuity at grid index {index}: |dω| = {jump:.3e} rad/s exceeds {limit:.3e} rad/s")]
    Discontinuity { index: usize, jump: f64, limit: f64 },

    #[error("quadrature did not converge: estimated error {achieved:.3e} > requested {requested:.3e}")]
    QuadratureNotConverged { achieved: f64, requested: f64 },

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("non-finite residual at parameters {params:?}")]
    NonFiniteResidual { params: Vec<f64> },

    #[error("at x index {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at_index(index: usize, source: Error) -> Self {
        Error::AtIndex {
            index,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite, got {value}")))
    }
}

pub(crate) fn ensure_positive(name: &str, value: f64) -> Result<()> {
    ensure_finite(name, value)?;
    if value > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be > 0, got {value}")))
    }
}
