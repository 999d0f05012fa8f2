use alloc::string::String;
use core::fmt;

/// Errors produced by the core crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not agree.
    Dimension {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    /// Jacobi sweeps hit the iteration cap.
    NoConvergence { sweeps: usize, residual: f64 },
    /// Malformed IDX payload.
    Parse(String),
    /// Invalid construction parameters.
    Config(String),
    /// Operation not permitted in the current estimator state.
    State(&'static str),
    /// The first-order estimator left its norm band.
    Drift { norm_x: f64, norm_d: f64, xi: f64 },
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, loss: f64 },
    /// An update or input carried NaN/Inf.
    NonFinite(&'static str),
    /// Spectrum of a zero matrix.
    UndefinedSpectrum,
    /// Every learning-rate candidate diverged.
    SearchFailed,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, expected, got } => {
                write!(f, "{op}: dimension mismatch (expected {expected}, got {got})")
            }
            Error::NoConvergence { sweeps, residual } => write!(
                f,
                "svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})"
            ),
            Error::Parse(msg) => write!(f, "idx parse error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::State(msg) => write!(f, "estimator state error: {msg}"),
            Error::Drift { norm_x, norm_d, xi } => write!(
                f,
                "taylor estimator drifted (|X| = {norm_x:.4}, |D| = {norm_d:.4}); try a smaller xi than {xi:e}"
            ),
            Error::Diverged { epoch, loss } => {
                write!(f, "training diverged at epoch {epoch} (loss = {loss})")
            }
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::UndefinedSpectrum => write!(f, "spectrum undefined for a zero matrix"),
            Error::SearchFailed => write!(f, "learning-rate search failed: every candidate diverged"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn check_dim(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { op, expected, got })
    }
}
