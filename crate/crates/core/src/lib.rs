//! Dynamical low-rank integrators for stochastic differential equations.
//!
//! An ensemble of `M` sample paths of a `d`-dimensional SDE is represented
//! as `X ≈ Uᵀ Y` with an orthonormal spatial basis `U` (`k x d`) and
//! stochastic coefficients `Y` (`k x M`). Three low-rank schemes are
//! provided next to the full-order Euler–Maruyama method:
//!
//! * [`Scheme::DlrEm`]: Euler–Maruyama on the coupled factor equations;
//! * [`Scheme::DlrPsEm`]: projector splitting applied to the Euler–Maruyama
//!   increment;
//! * [`Scheme::DlrPsSde`]: projector splitting on the SDE itself.
//!
//! Brownian increments come from a counter-based generator, so coarse grids
//! are exact sums of fine ones and runs are reproducible bit for bit.
//! Experiments are described in TOML and executed by [`harness`].

pub mod diagnostics;
pub mod ensemble;
pub mod harness;
pub mod integrators;
pub mod linalg;
pub mod models;
pub mod noise;

pub use diagnostics::{BoundTrace, DiagnosticsError, ErrorReport};
pub use ensemble::{EnsembleError, EnsembleState};
pub use harness::{ExperimentFile, ExperimentSpec, HarnessError};
pub use integrators::{integrate, InitialState, IntegrateOptions, IntegratorError, RunOutput, Scheme, StepOptions};
pub use linalg::{LinalgError, Matrix};
pub use models::{InitialLaw, ModelConfig, ModelError, Problem, SdeModel};
pub use noise::{BrownianGrid, NoiseError};

/// Any error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}
