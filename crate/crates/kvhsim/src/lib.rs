//! Phase-space simulation of Koopman-wavefunction classical mechanics,
//! the hybrid quantum-classical wave equation, and the positive-density
//! closure model, with conservation and consistency diagnostics.

pub mod closure;
pub mod dynamics;
pub mod error;
pub mod fd;
pub mod field;
pub mod grid;
pub mod hybrid;
pub mod kvh;
pub mod matrix_field;
pub mod spin;

pub use error::{Result, SimError};
pub use field::{ComplexField, CovectorField, PhaseVectorField, Poly, ScalarField};
pub use grid::PhaseSpaceGrid;
