use thiserror::Error;

use crate::expr::{EvalError, ParseError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("unsupported shape: {0}")]
    Shape(String),

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error(transparent)]
    Eval(#[from] EvalError),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("CFL violation{}: time step {dt:.4e} exceeds stability bound {bound:.4e} (need at least {min_steps} steps)", slice.map(|s| format!(" at slice {s}")).unwrap_or_default())]
    Cfl {
        dt: f64,
        bound: f64,
        min_steps: usize,
        slice: Option<usize>,
    },

    #[error("non-finite value produced at slice {slice}")]
    NonFinite { slice: usize },

    #[error("estimate invalid: {dead} of {total} paths aborted (first: {first})")]
    DeadPaths {
        dead: usize,
        total: usize,
        first: String,
    },
}

pub(crate) fn check_r(r: f64) -> Result<()> {
    if (1.0..=2.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::Domain(format!("exponent r = {r} must lie in [1, 2]")))
    }
}
