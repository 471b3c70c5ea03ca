//! Fields of n x n complex matrices over the phase-space grid: the numeric
//! carrier for Hermitian density-valued fields and matrix Hamiltonians.

use std::sync::Arc;

use ndarray::{Array2, Array4};
use num_complex::Complex64 as C64;

use crate::error::{Result, SimError};
use crate::field::{ensure_same_grid, ComplexField, ScalarField};
use crate::grid::PhaseSpaceGrid;

/// Matrix-valued field, indexed (q, p, row, col).
#[derive(Clone)]
pub struct MatrixField {
    grid: Arc<PhaseSpaceGrid>,
    n: usize,
    pub values: Array4<C64>,
}

pub const PAULI_X: [[C64; 2]; 2] = [
    [C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
    [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
];
pub const PAULI_Y: [[C64; 2]; 2] = [
    [C64::new(0.0, 0.0), C64::new(0.0, -1.0)],
    [C64::new(0.0, 1.0), C64::new(0.0, 0.0)],
];
pub const PAULI_Z: [[C64; 2]; 2] = [
    [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
    [C64::new(0.0, 0.0), C64::new(-1.0, 0.0)],
];

/// The Pauli matrix sigma_k (k = 0 is the identity) as an owned array.
pub fn pauli(k: usize) -> Array2<C64> {
    let raw: [[C64; 2]; 2] = match k {
        0 => [
            [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
            [C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
        ],
        1 => PAULI_X,
        2 => PAULI_Y,
        3 => PAULI_Z,
        _ => panic!("pauli index out of range"),
    };
    Array2::from_shape_fn((2, 2), |(a, b)| raw[a][b])
}

impl MatrixField {
    pub fn zeros(grid: Arc<PhaseSpaceGrid>, n: usize) -> Self {
        let (nq, np) = grid.shape();
        Self {
            grid,
            n,
            values: Array4::from_elem((nq, np, n, n), C64::new(0.0, 0.0)),
        }
    }

    pub fn from_fn(
        grid: Arc<PhaseSpaceGrid>,
        n: usize,
        f: impl Fn(f64, f64, usize, usize) -> C64,
    ) -> Self {
        let (nq, np) = grid.shape();
        let values = Array4::from_shape_fn((nq, np, n, n), |(i, j, a, b)| {
            f(grid.q_at(i), grid.p_at(j), a, b)
        });
        Self { grid, n, values }
    }

    /// f(z) times a constant matrix.
    pub fn scalar_times_matrix(f: &ScalarField, m: &Array2<C64>) -> Self {
        let n = m.nrows();
        assert_eq!(m.ncols(), n, "constant matrix must be square");
        let (nq, np) = f.grid().shape();
        let values = Array4::from_shape_fn((nq, np, n, n), |(i, j, a, b)| {
            m[(a, b)] * f.values[(i, j)]
        });
        Self {
            grid: f.grid().clone(),
            n,
            values,
        }
    }

    /// f(z) times the identity.
    pub fn scalar_times_identity(f: &ScalarField, n: usize) -> Self {
        let mut id = Array2::from_elem((n, n), C64::new(0.0, 0.0));
        for a in 0..n {
            id[(a, a)] = C64::new(1.0, 0.0);
        }
        Self::scalar_times_matrix(f, &id)
    }

    pub fn grid(&self) -> &Arc<PhaseSpaceGrid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        ensure_same_grid(&self.grid, &other.grid)?;
        if self.n != other.n {
            return Err(SimError::WrongQuantumDimension {
                expected: self.n,
                found: other.n,
            });
        }
        Ok(())
    }

    pub fn entry(&self, a: usize, b: usize) -> ComplexField {
        let (nq, np) = self.grid.shape();
        let values = Array2::from_shape_fn((nq, np), |(i, j)| self.values[(i, j, a, b)]);
        ComplexField::from_values(self.grid.clone(), values).expect("shape from grid")
    }

    pub fn set_entry(&mut self, a: usize, b: usize, f: &ComplexField) {
        let (nq, np) = self.grid.shape();
        for i in 0..nq {
            for j in 0..np {
                self.values[(i, j, a, b)] = f.values[(i, j)];
            }
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.check_compatible(other).expect("matrix field mismatch");
        Self {
            grid: self.grid.clone(),
            n: self.n,
            values: &self.values + &other.values,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.check_compatible(other).expect("matrix field mismatch");
        Self {
            grid: self.grid.clone(),
            n: self.n,
            values: &self.values - &other.values,
        }
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            grid: self.grid.clone(),
            n: self.n,
            values: self.values.mapv(|z| z * s),
        }
    }

    pub fn scale_re(&self, s: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            n: self.n,
            values: self.values.mapv(|z| z * s),
        }
    }

    /// Pointwise matrix product.
    pub fn matmul(&self, other: &Self) -> Self {
        self.check_compatible(other).expect("matrix field mismatch");
        let (nq, np) = self.grid.shape();
        let n = self.n;
        let mut out = Self::zeros(self.grid.clone(), n);
        for i in 0..nq {
            for j in 0..np {
                for a in 0..n {
                    for b in 0..n {
                        let mut acc = C64::new(0.0, 0.0);
                        for c in 0..n {
                            acc += self.values[(i, j, a, c)] * other.values[(i, j, c, b)];
                        }
                        out.values[(i, j, a, b)] = acc;
                    }
                }
            }
        }
        out
    }

    pub fn commutator(&self, other: &Self) -> Self {
        self.matmul(other).sub(&other.matmul(self))
    }

    pub fn adjoint(&self) -> Self {
        let (nq, np) = self.grid.shape();
        let n = self.n;
        let values = Array4::from_shape_fn((nq, np, n, n), |(i, j, a, b)| {
            self.values[(i, j, b, a)].conj()
        });
        Self {
            grid: self.grid.clone(),
            n,
            values,
        }
    }

    pub fn hermitian_deviation(&self) -> f64 {
        let (nq, np) = self.grid.shape();
        let mut dev = 0.0f64;
        for i in 0..nq {
            for j in 0..np {
                for a in 0..self.n {
                    for b in 0..self.n {
                        let d = self.values[(i, j, a, b)] - self.values[(i, j, b, a)].conj();
                        dev = dev.max(d.norm());
                    }
                }
            }
        }
        dev
    }

    pub fn hermitize(&self) -> Self {
        self.add(&self.adjoint()).scale_re(0.5)
    }

    pub fn trace(&self) -> ComplexField {
        let (nq, np) = self.grid.shape();
        let values = Array2::from_shape_fn((nq, np), |(i, j)| {
            (0..self.n).map(|a| self.values[(i, j, a, a)]).sum()
        });
        ComplexField::from_values(self.grid.clone(), values).expect("shape from grid")
    }

    pub fn trace_re(&self) -> ScalarField {
        self.trace().re()
    }

    /// Pointwise scaling by a real scalar field.
    pub fn mul_scalar(&self, f: &ScalarField) -> Self {
        ensure_same_grid(&self.grid, f.grid()).expect("matrix field mismatch");
        let (nq, np) = self.grid.shape();
        let mut out = self.clone();
        for i in 0..nq {
            for j in 0..np {
                let s = f.values[(i, j)];
                for a in 0..self.n {
                    for b in 0..self.n {
                        out.values[(i, j, a, b)] *= s;
                    }
                }
            }
        }
        out
    }

    pub fn partial_q(&self) -> Self {
        self.map_entries(|field| field.partial_q())
    }

    pub fn partial_p(&self) -> Self {
        self.map_entries(|field| field.partial_p())
    }

    fn map_entries(&self, f: impl Fn(ComplexField) -> ComplexField) -> Self {
        let mut out = Self::zeros(self.grid.clone(), self.n);
        for a in 0..self.n {
            for b in 0..self.n {
                let mapped = f(self.entry(a, b));
                out.set_entry(a, b, &mapped);
            }
        }
        out
    }

    pub fn dealias_inplace(&mut self) {
        for a in 0..self.n {
            for b in 0..self.n {
                let mut e = self.entry(a, b);
                self.grid.dealias_c(&mut e.values);
                self.set_entry(a, b, &e);
            }
        }
    }

    pub fn exp_filter_inplace(&mut self, alpha: f64, order: i32) {
        for a in 0..self.n {
            for b in 0..self.n {
                let mut e = self.entry(a, b);
                self.grid.exp_filter_c(&mut e.values, alpha, order);
                self.set_entry(a, b, &e);
            }
        }
    }

    /// Quadrature of the matrix field: an n x n matrix.
    pub fn integrate(&self) -> Array2<C64> {
        let (nq, np) = self.grid.shape();
        let mut out = Array2::from_elem((self.n, self.n), C64::new(0.0, 0.0));
        for i in 0..nq {
            for j in 0..np {
                for a in 0..self.n {
                    for b in 0..self.n {
                        out[(a, b)] += self.values[(i, j, a, b)];
                    }
                }
            }
        }
        out.mapv(|z| z * self.grid.cell_area())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, z| m.max(z.norm()))
    }

    /// Conjugate by a constant matrix: U A U^dagger pointwise.
    pub fn conjugate_by(&self, u: &Array2<C64>) -> Self {
        let uf = constant_matrix_field(self.grid.clone(), u);
        uf.matmul(self).matmul(&uf.adjoint())
    }

    /// Pointwise Hermitian eigenvalues, ascending, via nalgebra.
    pub fn eigenvalues_at(&self, i: usize, j: usize) -> Vec<f64> {
        let n = self.n;
        let m = nalgebra::DMatrix::from_fn(n, n, |a, b| self.values[(i, j, a, b)]);
        let sym = m.symmetric_eigen();
        let mut eig: Vec<f64> = sym.eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        eig
    }

    /// Smallest pointwise eigenvalue over the whole grid.
    pub fn min_eigenvalue(&self) -> f64 {
        let (nq, np) = self.grid.shape();
        let mut min = f64::INFINITY;
        for i in 0..nq {
            for j in 0..np {
                min = min.min(self.eigenvalues_at(i, j)[0]);
            }
        }
        min
    }
}

/// Constant matrix broadcast over the grid.
pub fn constant_matrix_field(grid: Arc<PhaseSpaceGrid>, m: &Array2<C64>) -> MatrixField {
    let n = m.nrows();
    let (nq, np) = grid.shape();
    let values = Array4::from_shape_fn((nq, np, n, n), |(_, _, a, b)| m[(a, b)]);
    MatrixField { grid, n, values }
}

/// Canonical bracket of two matrix fields, {A,B} = dA/dq dB/dp - dA/dp dB/dq
/// with pointwise matrix products and dealiased output.
pub fn matrix_poisson_bracket(a: &MatrixField, b: &MatrixField) -> Result<MatrixField> {
    a.check_compatible(b)?;
    let mut out = a
        .partial_q()
        .matmul(&b.partial_p())
        .sub(&a.partial_p().matmul(&b.partial_q()));
    out.dealias_inplace();
    Ok(out)
}

/// Bracket of a real scalar field with a matrix field.
pub fn scalar_matrix_bracket(f: &ScalarField, a: &MatrixField) -> Result<MatrixField> {
    ensure_same_grid(f.grid(), a.grid())?;
    let fq = f.partial_q();
    let fp = f.partial_p();
    let mut out = a.partial_p().mul_scalar(&fq).sub(&a.partial_q().mul_scalar(&fp));
    out.dealias_inplace();
    Ok(out)
}

/// Frobenius pairing <A, B> = Re Tr(A^dagger B) pointwise.
pub fn frobenius_pairing(a: &MatrixField, b: &MatrixField) -> ScalarField {
    a.adjoint().matmul(b).trace().re()
}
