use thiserror::Error;

/// Errors shared across the simulation layers.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("grid parameters invalid: {0}")]
    InvalidGrid(String),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("array shape {found:?} does not match grid {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("Hamiltonian is not Hermitian (max deviation {0:.3e})")]
    NonHermitian(f64),
    #[error("matrix is not unitary (max deviation {0:.3e})")]
    NonUnitary(f64),
    #[error("state vanishes everywhere; factorization mask is empty")]
    EmptyMask,
    #[error("field is not pointwise normalized (max deviation {0:.3e})")]
    NotNormalized(f64),
    #[error("classical density degenerate: {0}")]
    DegenerateDensity(String),
    #[error("unsupported Casimir generator: {0}")]
    UnsupportedPhi(String),
    #[error("operation requires quantum dimension {expected}, state has {found}")]
    WrongQuantumDimension { expected: usize, found: usize },
    #[error("non-finite value detected in state at t = {0}")]
    NonFiniteState(f64),
    #[error("state kind {state} does not match model {model}")]
    ModelMismatch {
        model: &'static str,
        state: &'static str,
    },
    #[error("integrator config invalid: {0}")]
    InvalidConfig(String),
    #[error("convergence study needs at least {needed} dt values with ratio 2, got {got}")]
    InsufficientDtLadder { needed: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, SimError>;
