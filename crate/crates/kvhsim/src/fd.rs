//! Eighth-order centered finite differences on periodic grids.
//!
//! This backend exists as a cross-check oracle for the spectral derivative
//! stack; nothing in the propagators uses it.

use ndarray::Array2;
use num_complex::Complex64;

/// Stencil weights for offsets 1..=4; the scheme is antisymmetric.
const COEF: [f64; 4] = [4.0 / 5.0, -1.0 / 5.0, 4.0 / 105.0, -1.0 / 280.0];

fn deriv_axis<T>(f: &Array2<T>, axis: usize, h: f64) -> Array2<T>
where
    T: Copy
        + Default
        + std::ops::Add<Output = T>
        + std::ops::Sub<Output = T>
        + std::ops::Mul<f64, Output = T>,
{
    let (nq, np) = f.dim();
    let n = if axis == 0 { nq } else { np };
    let mut out = Array2::<T>::default((nq, np));
    for i in 0..nq {
        for j in 0..np {
            let mut acc = T::default();
            for (m, &c) in COEF.iter().enumerate() {
                let off = m + 1;
                let (fwd, bwd) = if axis == 0 {
                    (f[((i + off) % n, j)], f[((i + n - off) % n, j)])
                } else {
                    (f[(i, (j + off) % n)], f[(i, (j + n - off) % n)])
                };
                acc = acc + (fwd - bwd) * c;
            }
            out[(i, j)] = acc * (1.0 / h);
        }
    }
    out
}

pub fn fd_deriv_q(f: &Array2<f64>, dq: f64) -> Array2<f64> {
    deriv_axis(f, 0, dq)
}

pub fn fd_deriv_p(f: &Array2<f64>, dp: f64) -> Array2<f64> {
    deriv_axis(f, 1, dp)
}

pub fn fd_deriv_q_c(f: &Array2<Complex64>, dq: f64) -> Array2<Complex64> {
    deriv_axis(f, 0, dq)
}

pub fn fd_deriv_p_c(f: &Array2<Complex64>, dp: f64) -> Array2<Complex64> {
    deriv_axis(f, 1, dp)
}
