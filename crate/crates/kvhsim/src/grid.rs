//! Periodic rectangular discretization of the phase space T*Q with the
//! spectral machinery used by every layer above: FFT-based differentiation,
//! 2/3-rule dealiasing and Liouville-measure quadrature.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, SimError};

pub type C64 = Complex64;

/// Periodic grid on `[q_min, q_max) x [p_min, p_max)` with `nq x np` points.
///
/// Axis 0 indexes q, axis 1 indexes p. The right/top edges are excluded;
/// the trapezoid rule therefore reduces to the (spectrally exact) rectangle
/// rule and quadrature of the constant-1 field is the exact box area.
pub struct PhaseSpaceGrid {
    nq: usize,
    np: usize,
    q_min: f64,
    q_max: f64,
    p_min: f64,
    p_max: f64,
    pub periodic: bool,
    /// Derivative wavenumbers (Nyquist zeroed) in FFT ordering.
    kq: Vec<f64>,
    kp: Vec<f64>,
    fft_q_fwd: Arc<dyn Fft<f64>>,
    fft_q_inv: Arc<dyn Fft<f64>>,
    fft_p_fwd: Arc<dyn Fft<f64>>,
    fft_p_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PhaseSpaceGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PhaseSpaceGrid")
            .field("nq", &self.nq)
            .field("np", &self.np)
            .field("q", &(self.q_min, self.q_max))
            .field("p", &(self.p_min, self.p_max))
            .finish()
    }
}

fn derivative_wavenumbers(n: usize, length: f64) -> Vec<f64> {
    let mut k = vec![0.0; n];
    let base = 2.0 * std::f64::consts::PI / length;
    for (i, ki) in k.iter_mut().enumerate() {
        let m = if i <= n / 2 { i as i64 } else { i as i64 - n as i64 };
        *ki = base * m as f64;
    }
    // Nyquist mode carries no usable sign information for odd derivatives.
    k[n / 2] = 0.0;
    k
}

impl PhaseSpaceGrid {
    pub fn new(
        nq: usize,
        np: usize,
        q_min: f64,
        q_max: f64,
        p_min: f64,
        p_max: f64,
    ) -> Result<Arc<Self>> {
        if nq < 8 || np < 8 || nq % 2 != 0 || np % 2 != 0 {
            return Err(SimError::InvalidGrid(format!(
                "nq, np must be even and >= 8, got {nq} x {np}"
            )));
        }
        if !(q_max > q_min && p_max > p_min) {
            return Err(SimError::InvalidGrid(format!(
                "empty domain [{q_min},{q_max}) x [{p_min},{p_max})"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Arc::new(Self {
            nq,
            np,
            q_min,
            q_max,
            p_min,
            p_max,
            periodic: true,
            kq: derivative_wavenumbers(nq, q_max - q_min),
            kp: derivative_wavenumbers(np, p_max - p_min),
            fft_q_fwd: planner.plan_fft_forward(nq),
            fft_q_inv: planner.plan_fft_inverse(nq),
            fft_p_fwd: planner.plan_fft_forward(np),
            fft_p_inv: planner.plan_fft_inverse(np),
        }))
    }

    /// Square grid on `[-half, half)^2`, the usual testing setup.
    pub fn square(n: usize, half: f64) -> Result<Arc<Self>> {
        Self::new(n, n, -half, half, -half, half)
    }

    pub fn nq(&self) -> usize {
        self.nq
    }
    pub fn np(&self) -> usize {
        self.np
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.nq, self.np)
    }
    pub fn extents(&self) -> (f64, f64, f64, f64) {
        (self.q_min, self.q_max, self.p_min, self.p_max)
    }
    pub fn dq(&self) -> f64 {
        (self.q_max - self.q_min) / self.nq as f64
    }
    pub fn dp(&self) -> f64 {
        (self.p_max - self.p_min) / self.np as f64
    }
    pub fn cell_area(&self) -> f64 {
        self.dq() * self.dp()
    }
    pub fn q_at(&self, i: usize) -> f64 {
        self.q_min + i as f64 * self.dq()
    }
    pub fn p_at(&self, j: usize) -> f64 {
        self.p_min + j as f64 * self.dp()
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.nq == other.nq
            && self.np == other.np
            && self.q_min == other.q_min
            && self.q_max == other.q_max
            && self.p_min == other.p_min
            && self.p_max == other.p_max
    }

    pub fn check_shape(&self, shape: (usize, usize)) -> Result<()> {
        if shape == (self.nq, self.np) {
            Ok(())
        } else {
            Err(SimError::ShapeMismatch {
                expected: (self.nq, self.np),
                found: shape,
            })
        }
    }

    /// Liouville quadrature of a complex field.
    pub fn integrate_c(&self, f: &Array2<C64>) -> C64 {
        f.iter().sum::<C64>() * self.cell_area()
    }

    /// Liouville quadrature of a real field.
    pub fn integrate(&self, f: &Array2<f64>) -> f64 {
        f.iter().sum::<f64>() * self.cell_area()
    }

    fn apply_along_p(&self, data: &mut Array2<C64>, op: impl Fn(&mut [C64], &[f64])) {
        for mut row in data.rows_mut() {
            let slice = row.as_slice_mut().expect("contiguous row");
            op(slice, &self.kp);
        }
    }

    fn apply_along_q(&self, data: &mut Array2<C64>, op: impl Fn(&mut [C64], &[f64])) {
        let mut buf = vec![C64::new(0.0, 0.0); self.nq];
        for j in 0..self.np {
            for i in 0..self.nq {
                buf[i] = data[(i, j)];
            }
            op(&mut buf, &self.kq);
            for i in 0..self.nq {
                data[(i, j)] = buf[i];
            }
        }
    }

    fn spectral_filter_1d(
        fwd: &Arc<dyn Fft<f64>>,
        inv: &Arc<dyn Fft<f64>>,
        line: &mut [C64],
        k: &[f64],
        weight: impl Fn(f64, usize, usize) -> C64,
    ) {
        let n = line.len();
        fwd.process(line);
        for (idx, v) in line.iter_mut().enumerate() {
            *v *= weight(k[idx], idx, n);
        }
        inv.process(line);
        let scale = 1.0 / n as f64;
        for v in line.iter_mut() {
            *v *= scale;
        }
    }

    /// Spectral partial derivative along q of a complex field.
    pub fn deriv_q_c(&self, f: &Array2<C64>) -> Array2<C64> {
        let mut out = f.clone();
        let (fwd, inv) = (self.fft_q_fwd.clone(), self.fft_q_inv.clone());
        self.apply_along_q(&mut out, |line, k| {
            Self::spectral_filter_1d(&fwd, &inv, line, k, |kv, _, _| C64::new(0.0, kv));
        });
        out
    }

    /// Spectral partial derivative along p of a complex field.
    pub fn deriv_p_c(&self, f: &Array2<C64>) -> Array2<C64> {
        let mut out = f.clone();
        let (fwd, inv) = (self.fft_p_fwd.clone(), self.fft_p_inv.clone());
        self.apply_along_p(&mut out, |line, k| {
            Self::spectral_filter_1d(&fwd, &inv, line, k, |kv, _, _| C64::new(0.0, kv));
        });
        out
    }

    pub fn deriv_q(&self, f: &Array2<f64>) -> Array2<f64> {
        let c = f.mapv(|x| C64::new(x, 0.0));
        self.deriv_q_c(&c).mapv(|z| z.re)
    }

    pub fn deriv_p(&self, f: &Array2<f64>) -> Array2<f64> {
        let c = f.mapv(|x| C64::new(x, 0.0));
        self.deriv_p_c(&c).mapv(|z| z.re)
    }

    /// 2/3-rule dealiasing: zero all modes above two thirds of the Nyquist
    /// index along each axis.
    pub fn dealias_c(&self, f: &mut Array2<C64>) {
        let cut_q = self.nq / 3;
        let cut_p = self.np / 3;
        let (fwd_q, inv_q) = (self.fft_q_fwd.clone(), self.fft_q_inv.clone());
        let (fwd_p, inv_p) = (self.fft_p_fwd.clone(), self.fft_p_inv.clone());
        self.apply_along_p(f, |line, _| {
            Self::spectral_filter_1d(&fwd_p, &inv_p, line, &self.kp, |_, idx, n| {
                let m = if idx <= n / 2 { idx } else { n - idx };
                if m > cut_p {
                    C64::new(0.0, 0.0)
                } else {
                    C64::new(1.0, 0.0)
                }
            });
        });
        self.apply_along_q(f, |line, _| {
            Self::spectral_filter_1d(&fwd_q, &inv_q, line, &self.kq, |_, idx, n| {
                let m = if idx <= n / 2 { idx } else { n - idx };
                if m > cut_q {
                    C64::new(0.0, 0.0)
                } else {
                    C64::new(1.0, 0.0)
                }
            });
        });
    }

    pub fn dealias(&self, f: &mut Array2<f64>) {
        let mut c = f.mapv(|x| C64::new(x, 0.0));
        self.dealias_c(&mut c);
        f.zip_mut_with(&c, |x, z| *x = z.re);
    }

    /// High-order exponential low-pass filter: modes at index m within the
    /// retained band are scaled by exp(-alpha (m/cut)^order) along each axis,
    /// with cut the 2/3 dealiasing index; modes above cut are zeroed.  Leaves
    /// the mean (m = 0) untouched.
    pub fn exp_filter_c(&self, f: &mut Array2<C64>, alpha: f64, order: i32) {
        let factor = |cut: usize| {
            move |_: f64, idx: usize, n: usize| {
                let m = if idx <= n / 2 { idx } else { n - idx };
                if m > cut {
                    C64::new(0.0, 0.0)
                } else {
                    C64::new((-alpha * (m as f64 / cut as f64).powi(order)).exp(), 0.0)
                }
            }
        };
        let (fwd_q, inv_q) = (self.fft_q_fwd.clone(), self.fft_q_inv.clone());
        let (fwd_p, inv_p) = (self.fft_p_fwd.clone(), self.fft_p_inv.clone());
        let (wq, wp) = (factor(self.nq / 3), factor(self.np / 3));
        self.apply_along_p(f, |line, _| {
            Self::spectral_filter_1d(&fwd_p, &inv_p, line, &self.kp, wp);
        });
        self.apply_along_q(f, |line, _| {
            Self::spectral_filter_1d(&fwd_q, &inv_q, line, &self.kq, wq);
        });
    }

    pub fn exp_filter(&self, f: &mut Array2<f64>, alpha: f64, order: i32) {
        let mut c = f.mapv(|x| C64::new(x, 0.0));
        self.exp_filter_c(&mut c, alpha, order);
        f.zip_mut_with(&c, |x, z| *x = z.re);
    }
}
