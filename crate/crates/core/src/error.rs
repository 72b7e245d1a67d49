use thiserror::Error;

use crate::group::GroupPoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid group structure: {0}")]
    InvalidGroup(String),

    /// A numerical routine produced a non-finite or degenerate value.
    #[error("numerical failure ({context}): {message}")]
    Numerical { context: String, message: String },

    /// No start of the exponential-map inversion converged.
    #[error("distance unresolved at {point}: best residual {residual:.3e}")]
    Unresolved { point: GroupPoint, residual: f64 },

    /// The denominator of a Monte Carlo ratio is not resolved away from zero.
    #[error("ratio unresolved at {point}: denominator interval [{low:.3e}, {high:.3e}]")]
    UnresolvedRatio { point: GroupPoint, low: f64, high: f64 },

    #[error("point outside the smooth set: {0}")]
    Domain(String),

    #[error("small-time asymptotics did not settle: {0}")]
    Asymptotics(String),

    /// Too many samples of a scan failed.
    #[error("scan aborted: {0}")]
    Scan(String),
}

impl Error {
    pub(crate) fn numerical(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            message: message.into(),
        }
    }

    /// `true` for errors caused by the caller's input rather than by numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Dimension { .. } | Error::Input(_) | Error::InvalidGroup(_) | Error::Domain(_)
        )
    }
}
