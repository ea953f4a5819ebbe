use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// The variants are grouped by the exit code the CLI maps them to: configuration
/// problems, physics failures (escapes, unstable potentials, non-converging
/// equilibria) and fit failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown channel {0}")]
    UnknownChannel(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("ion {ion} escaped the trap at t = {time:.4} µs (position {position:?})")]
    Escape {
        ion: usize,
        time: f64,
        position: [f64; 3],
    },

    #[error("unstable configuration: smallest Hessian eigenvalue {min_eigenvalue:.3e}")]
    Unstable { min_eigenvalue: f64 },

    #[error("equilibrium search did not converge after {iterations} iterations (|grad| = {gradient_norm:.3e})")]
    NoEquilibrium {
        iterations: usize,
        gradient_norm: f64,
    },

    #[error("equilibrium search ended on a saddle point")]
    Saddle,

    #[error("ions coincide: separation {0:.3e} µm")]
    Coincident(f64),

    #[error("qubit error: {0}")]
    Qubit(String),

    #[error("sequence error: {0}")]
    Sequence(String),

    #[error("tomography error: {0}")]
    Tomography(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::UnknownChannel(_)
            | Error::Schedule(_)
            | Error::Sequence(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 2,
            Error::Escape { .. }
            | Error::Unstable { .. }
            | Error::NoEquilibrium { .. }
            | Error::Saddle
            | Error::Coincident(_)
            | Error::Calibration(_)
            | Error::Qubit(_)
            | Error::Tomography(_) => 3,
            Error::Fit(_) | Error::Optimizer(_) => 4,
        }
    }

    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::UnknownChannel(_) => "unknown_channel",
            Error::Calibration(_) => "calibration",
            Error::Schedule(_) => "schedule",
            Error::Escape { .. } => "escape",
            Error::Unstable { .. } => "unstable",
            Error::NoEquilibrium { .. } => "no_equilibrium",
            Error::Saddle => "saddle",
            Error::Coincident(_) => "coincident",
            Error::Qubit(_) => "qubit",
            Error::Sequence(_) => "sequence",
            Error::Tomography(_) => "tomography",
            Error::Fit(_) => "fit",
            Error::Optimizer(_) => "optimizer",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
