use nalgebra::DVector;

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller violated a documented precondition (bad index, value out of domain).
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed configuration or inconsistent grid/bin setup.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical routine failed to converge or produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A trajectory left the declared state box.
    #[error("trajectory escaped the state box at t={t}: {state:?}")]
    Escape { t: f64, state: DVector<f64> },

    /// The hold target cannot be sustained within the control bound.
    #[error("infeasible hold: required mean control {required} exceeds bound {bound}")]
    InfeasibleHold { required: f64, bound: f64 },

    /// The optimizer could not reduce the constraint residual below tolerance.
    #[error("infeasible problem: best constraint residual {residual}")]
    Infeasible { residual: f64 },

    /// The noiseless reach solver did not reach the target.
    #[error("unreachable target: residual {residual} above tolerance after restarts")]
    Unreachable { residual: f64 },

    /// A control magnitude exceeded the bound it must respect.
    #[error("saturation: {0}")]
    Saturation(String),

    /// I/O failure while writing or reading artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for validation/usage problems,
    /// 3 for numeric failures, 4 for infeasible problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Numeric(_) | Error::Escape { .. } | Error::Io(_) => 3,
            Error::InfeasibleHold { .. }
            | Error::Infeasible { .. }
            | Error::Unreachable { .. }
            | Error::Saturation(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
