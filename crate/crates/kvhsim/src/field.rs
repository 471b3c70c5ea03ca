//! Scalar, complex, covector and vector fields on the phase-space grid,
//! together with the canonical Poisson structure.
//!
//! Fields built from polynomials in (q, p) carry their coefficients along and
//! are differentiated analytically. A periodic grid cannot represent the
//! coordinate functions themselves faithfully (their sampled values are
//! sawtooths with O(1) spectral derivative error), so every field that is
//! secretly a polynomial, like the canonical one-form or a quartic
//! Hamiltonian, keeps the exact derivative path. Gridded fields fall back to
//! spectral differentiation.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Result, SimError};
use crate::grid::PhaseSpaceGrid;

pub type C64 = Complex64;

/// Real polynomial in (q, p), stored as monomial coefficients `q^a p^b`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Poly {
    terms: BTreeMap<(u32, u32), f64>,
}

impl Poly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self::monomial(0, 0, c)
    }

    pub fn monomial(a: u32, b: u32, c: f64) -> Self {
        let mut terms = BTreeMap::new();
        if c != 0.0 {
            terms.insert((a, b), c);
        }
        Self { terms }
    }

    pub fn from_terms(terms: impl IntoIterator<Item = ((u32, u32), f64)>) -> Self {
        let mut out = Self::zero();
        for ((a, b), c) in terms {
            out.add_term(a, b, c);
        }
        out
    }

    pub fn terms(&self) -> impl Iterator<Item = (&(u32, u32), &f64)> {
        self.terms.iter()
    }

    fn add_term(&mut self, a: u32, b: u32, c: f64) {
        if c == 0.0 {
            return;
        }
        let slot = self.terms.entry((a, b)).or_insert(0.0);
        *slot += c;
        if *slot == 0.0 {
            self.terms.remove(&(a, b));
        }
    }

    pub fn eval(&self, q: f64, p: f64) -> f64 {
        self.terms
            .iter()
            .map(|(&(a, b), &c)| c * q.powi(a as i32) * p.powi(b as i32))
            .sum()
    }

    pub fn partial_q(&self) -> Self {
        let mut out = Self::zero();
        for (&(a, b), &c) in &self.terms {
            if a > 0 {
                out.add_term(a - 1, b, c * a as f64);
            }
        }
        out
    }

    pub fn partial_p(&self) -> Self {
        let mut out = Self::zero();
        for (&(a, b), &c) in &self.terms {
            if b > 0 {
                out.add_term(a, b - 1, c * b as f64);
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (&(a, b), &c) in &other.terms {
            out.add_term(a, b, c);
        }
        out
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = Self::zero();
        for (&(a, b), &c) in &self.terms {
            out.add_term(a, b, c * s);
        }
        out
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Self::zero();
        for (&(a1, b1), &c1) in &self.terms {
            for (&(a2, b2), &c2) in &other.terms {
                out.add_term(a1 + a2, b1 + b2, c1 * c2);
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self.terms.len() {
            0 => Some(0.0),
            1 => self.terms.get(&(0, 0)).copied(),
            _ => None,
        }
    }
}

pub(crate) fn ensure_same_grid(a: &PhaseSpaceGrid, b: &PhaseSpaceGrid) -> Result<()> {
    if a.same_grid(b) {
        Ok(())
    } else {
        Err(SimError::GridMismatch)
    }
}

/// Real scalar field on the grid.
#[derive(Clone)]
pub struct ScalarField {
    grid: Arc<PhaseSpaceGrid>,
    pub values: Array2<f64>,
    poly: Option<Poly>,
}

impl ScalarField {
    pub fn from_values(grid: Arc<PhaseSpaceGrid>, values: Array2<f64>) -> Result<Self> {
        grid.check_shape(values.dim())?;
        Ok(Self {
            grid,
            values,
            poly: None,
        })
    }

    pub fn from_fn(grid: Arc<PhaseSpaceGrid>, f: impl Fn(f64, f64) -> f64) -> Self {
        let values =
            Array2::from_shape_fn(grid.shape(), |(i, j)| f(grid.q_at(i), grid.p_at(j)));
        Self {
            grid,
            values,
            poly: None,
        }
    }

    pub fn from_poly(grid: Arc<PhaseSpaceGrid>, poly: Poly) -> Self {
        let values =
            Array2::from_shape_fn(grid.shape(), |(i, j)| poly.eval(grid.q_at(i), grid.p_at(j)));
        Self {
            grid,
            values,
            poly: Some(poly),
        }
    }

    pub fn zeros(grid: Arc<PhaseSpaceGrid>) -> Self {
        Self::from_poly(grid, Poly::zero())
    }

    pub fn constant(grid: Arc<PhaseSpaceGrid>, c: f64) -> Self {
        Self::from_poly(grid, Poly::constant(c))
    }

    /// The coordinate function q (exact-derivative path).
    pub fn coord_q(grid: Arc<PhaseSpaceGrid>) -> Self {
        Self::from_poly(grid, Poly::monomial(1, 0, 1.0))
    }

    /// The coordinate function p (exact-derivative path).
    pub fn coord_p(grid: Arc<PhaseSpaceGrid>) -> Self {
        Self::from_poly(grid, Poly::monomial(0, 1, 1.0))
    }

    pub fn grid(&self) -> &Arc<PhaseSpaceGrid> {
        &self.grid
    }

    pub fn poly(&self) -> Option<&Poly> {
        self.poly.as_ref()
    }

    /// Exponential low-pass filter; drops the polynomial shortcut since the
    /// values are no longer exactly polynomial.
    pub fn exp_filter_inplace(&mut self, alpha: f64, order: i32) {
        self.grid.exp_filter(&mut self.values, alpha, order);
        self.poly = None;
    }

    pub fn partial_q(&self) -> Self {
        match &self.poly {
            Some(poly) => Self::from_poly(self.grid.clone(), poly.partial_q()),
            None => Self {
                grid: self.grid.clone(),
                values: self.grid.deriv_q(&self.values),
                poly: None,
            },
        }
    }

    pub fn partial_p(&self) -> Self {
        match &self.poly {
            Some(poly) => Self::from_poly(self.grid.clone(), poly.partial_p()),
            None => Self {
                grid: self.grid.clone(),
                values: self.grid.deriv_p(&self.values),
                poly: None,
            },
        }
    }

    pub fn integrate(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            * self.grid.cell_area().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn max(&self) -> f64 {
        self.values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    pub fn add(&self, other: &Self) -> Self {
        assert!(self.grid.same_grid(&other.grid), "field grid mismatch");
        Self {
            grid: self.grid.clone(),
            values: &self.values + &other.values,
            poly: match (&self.poly, &other.poly) {
                (Some(a), Some(b)) => Some(a.add(b)),
                _ => None,
            },
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.mapv(|v| v * s),
            poly: self.poly.as_ref().map(|p| p.scale(s)),
        }
    }

    pub fn mul(&self, other: &Self) -> Self {
        assert!(self.grid.same_grid(&other.grid), "field grid mismatch");
        Self {
            grid: self.grid.clone(),
            values: &self.values * &other.values,
            poly: match (&self.poly, &other.poly) {
                (Some(a), Some(b)) => Some(a.mul(b)),
                _ => None,
            },
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.mapv(&f),
            poly: None,
        }
    }

    /// Deterministic band-limited test field: a sum of cosine modes with
    /// integer wavenumbers up to `max_mode` on each axis.
    pub fn band_limited(
        grid: Arc<PhaseSpaceGrid>,
        max_mode: i32,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let (q_min, q_max, p_min, p_max) = grid.extents();
        let (lq, lp) = (q_max - q_min, p_max - p_min);
        let mut modes = Vec::new();
        for mq in -max_mode..=max_mode {
            for mp in -max_mode..=max_mode {
                if mq == 0 && mp == 0 {
                    continue;
                }
                let amp: f64 = rng.gen_range(-1.0..1.0);
                let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                modes.push((mq as f64, mp as f64, amp, phase));
            }
        }
        let offset: f64 = rng.gen_range(-1.0..1.0);
        Self::from_fn(grid, |q, p| {
            let mut v = offset;
            for &(mq, mp, amp, phase) in &modes {
                v += amp
                    * (std::f64::consts::TAU * (mq * (q - q_min) / lq + mp * (p - p_min) / lp)
                        + phase)
                        .cos();
            }
            v
        })
    }
}

/// Complex scalar field on the grid.
#[derive(Clone)]
pub struct ComplexField {
    grid: Arc<PhaseSpaceGrid>,
    pub values: Array2<C64>,
}

impl ComplexField {
    pub fn from_values(grid: Arc<PhaseSpaceGrid>, values: Array2<C64>) -> Result<Self> {
        grid.check_shape(values.dim())?;
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Arc<PhaseSpaceGrid>, f: impl Fn(f64, f64) -> C64) -> Self {
        let values =
            Array2::from_shape_fn(grid.shape(), |(i, j)| f(grid.q_at(i), grid.p_at(j)));
        Self { grid, values }
    }

    pub fn zeros(grid: Arc<PhaseSpaceGrid>) -> Self {
        let values = Array2::from_elem(grid.shape(), C64::new(0.0, 0.0));
        Self { grid, values }
    }

    pub fn from_real(f: &ScalarField) -> Self {
        Self {
            grid: f.grid().clone(),
            values: f.values.mapv(|v| C64::new(v, 0.0)),
        }
    }

    pub fn grid(&self) -> &Arc<PhaseSpaceGrid> {
        &self.grid
    }

    pub fn partial_q(&self) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.grid.deriv_q_c(&self.values),
        }
    }

    pub fn partial_p(&self) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.grid.deriv_p_c(&self.values),
        }
    }

    pub fn conj(&self) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.mapv(|z| z.conj()),
        }
    }

    pub fn re(&self) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.mapv(|z| z.re),
            poly: None,
        }
    }

    pub fn im(&self) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.mapv(|z| z.im),
            poly: None,
        }
    }

    pub fn abs_sq(&self) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.mapv(|z| z.norm_sqr()),
            poly: None,
        }
    }

    pub fn integrate(&self) -> C64 {
        self.grid.integrate_c(&self.values)
    }

    /// L2 inner product with the physics convention (conjugate-linear in the
    /// first slot).
    pub fn inner(&self, other: &Self) -> C64 {
        assert!(self.grid.same_grid(&other.grid), "field grid mismatch");
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a.conj() * b)
            .sum::<C64>()
            * self.grid.cell_area()
    }

    pub fn norm_sq(&self) -> f64 {
        self.inner(self).re
    }

    pub fn add(&self, other: &Self) -> Self {
        assert!(self.grid.same_grid(&other.grid), "field grid mismatch");
        Self {
            grid: self.grid.clone(),
            values: &self.values + &other.values,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert!(self.grid.same_grid(&other.grid), "field grid mismatch");
        Self {
            grid: self.grid.clone(),
            values: &self.values - &other.values,
        }
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.mapv(|z| z * s),
        }
    }

    pub fn mul(&self, other: &Self) -> Self {
        assert!(self.grid.same_grid(&other.grid), "field grid mismatch");
        Self {
            grid: self.grid.clone(),
            values: &self.values * &other.values,
        }
    }

    pub fn mul_real(&self, other: &ScalarField) -> Self {
        assert!(self.grid.same_grid(other.grid()), "field grid mismatch");
        let mut values = self.values.clone();
        values.zip_mut_with(&other.values, |z, &r| *z *= r);
        Self {
            grid: self.grid.clone(),
            values,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, z| m.max(z.norm()))
    }

    pub fn exp_filter_inplace(&mut self, alpha: f64, order: i32) {
        self.grid.exp_filter_c(&mut self.values, alpha, order);
    }

    pub fn band_limited(
        grid: Arc<PhaseSpaceGrid>,
        max_mode: i32,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let re = ScalarField::band_limited(grid.clone(), max_mode, rng);
        let im = ScalarField::band_limited(grid, max_mode, rng);
        let mut out = Self::from_real(&re);
        out.values.zip_mut_with(&im.values, |z, &v| z.im = v);
        out
    }
}

/// One-form on phase space, components (alpha_q, alpha_p).
#[derive(Clone)]
pub struct CovectorField {
    pub comp_q: ScalarField,
    pub comp_p: ScalarField,
}

/// Vector field on phase space, components (v_q, v_p).
#[derive(Clone)]
pub struct PhaseVectorField {
    pub comp_q: ScalarField,
    pub comp_p: ScalarField,
}

impl PhaseVectorField {
    pub fn grid(&self) -> &Arc<PhaseSpaceGrid> {
        self.comp_q.grid()
    }

    pub fn max_norm(&self) -> f64 {
        self.comp_q
            .values
            .iter()
            .zip(self.comp_p.values.iter())
            .fold(0.0, |m, (a, b)| m.max(a.hypot(*b)))
    }
}

/// Canonical one-form in the gauge A = p dq, components (p, 0).
pub fn canonical_one_form(grid: &Arc<PhaseSpaceGrid>) -> CovectorField {
    CovectorField {
        comp_q: ScalarField::coord_p(grid.clone()),
        comp_p: ScalarField::zeros(grid.clone()),
    }
}

/// Raise a one-form with the symplectic structure: J(a_q, a_p) = (a_p, -a_q).
pub fn symplectic_raise(alpha: &CovectorField) -> PhaseVectorField {
    PhaseVectorField {
        comp_q: alpha.comp_p.clone(),
        comp_p: alpha.comp_q.scale(-1.0),
    }
}

/// Hamiltonian vector field X_H = (dH/dp, -dH/dq).
pub fn hamiltonian_vector_field(h: &ScalarField) -> PhaseVectorField {
    PhaseVectorField {
        comp_q: h.partial_p(),
        comp_p: h.partial_q().scale(-1.0),
    }
}

/// Divergence of a phase-space vector field.
pub fn divergence(v: &PhaseVectorField) -> Result<ScalarField> {
    ensure_same_grid(v.comp_q.grid(), v.comp_p.grid())?;
    Ok(v.comp_q.partial_q().add(&v.comp_p.partial_p()))
}

/// Canonical Poisson bracket {f,g} = df/dq dg/dp - df/dp dg/dq.
///
/// Polynomial pairs are combined exactly; any gridded operand routes the
/// product through the 2/3-rule dealiasing filter.
pub fn poisson_bracket(f: &ScalarField, g: &ScalarField) -> Result<ScalarField> {
    ensure_same_grid(f.grid(), g.grid())?;
    if let (Some(pf), Some(pg)) = (f.poly(), g.poly()) {
        let bracket = pf
            .partial_q()
            .mul(&pg.partial_p())
            .add(&pf.partial_p().mul(&pg.partial_q()).scale(-1.0));
        return Ok(ScalarField::from_poly(f.grid().clone(), bracket));
    }
    let mut values = &f.partial_q().values * &g.partial_p().values
        - &f.partial_p().values * &g.partial_q().values;
    f.grid().dealias(&mut values);
    Ok(ScalarField {
        grid: f.grid().clone(),
        values,
        poly: None,
    })
}

/// Bracket of a real (possibly polynomial) field with a complex field.
pub fn poisson_bracket_sc(h: &ScalarField, psi: &ComplexField) -> Result<ComplexField> {
    ensure_same_grid(h.grid(), psi.grid())?;
    let (hq, hp) = (h.partial_q(), h.partial_p());
    let (pq, pp) = (psi.partial_q(), psi.partial_p());
    let mut values = Array2::from_elem(h.grid().shape(), C64::new(0.0, 0.0));
    ndarray::Zip::from(&mut values)
        .and(&hq.values)
        .and(&hp.values)
        .and(&pq.values)
        .and(&pp.values)
        .for_each(|out, &a, &b, &dq, &dp| *out = dp * a - dq * b);
    h.grid().dealias_c(&mut values);
    Ok(ComplexField {
        grid: h.grid().clone(),
        values,
    })
}

/// Bracket of two complex fields.
pub fn poisson_bracket_cc(a: &ComplexField, b: &ComplexField) -> Result<ComplexField> {
    ensure_same_grid(a.grid(), b.grid())?;
    let mut values = &a.partial_q().values * &b.partial_p().values
        - &a.partial_p().values * &b.partial_q().values;
    a.grid().dealias_c(&mut values);
    Ok(ComplexField {
        grid: a.grid().clone(),
        values,
    })
}

/// Pairing of a covector with a vector field, A . V.
pub fn pair(alpha: &CovectorField, v: &PhaseVectorField) -> ScalarField {
    alpha.comp_q.mul(&v.comp_q).add(&alpha.comp_p.mul(&v.comp_p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid64() -> Arc<PhaseSpaceGrid> {
        PhaseSpaceGrid::square(64, 8.0).unwrap()
    }

    #[test]
    fn sine_derivative_is_analytic() {
        let grid = grid64();
        let lq = 16.0;
        let k = std::f64::consts::TAU / lq;
        let f = ScalarField::from_fn(grid.clone(), |q, _| (k * q).sin());
        let df = f.partial_q();
        let exact = ScalarField::from_fn(grid, |q, _| k * (k * q).cos());
        assert!(df.sub(&exact).max_abs() < 1e-10);
    }

    #[test]
    fn constant_derivative_vanishes() {
        let grid = grid64();
        let f = ScalarField::from_fn(grid, |_, _| 3.25);
        assert_eq!(f.partial_q().max_abs(), 0.0);
        assert_eq!(f.partial_p().max_abs(), 0.0);
    }

    #[test]
    fn spectral_matches_finite_differences() {
        let grid = grid64();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Modest modes keep the FD truncation error below the comparison
        // tolerance; the FD scheme is the less accurate side here.
        let f = ScalarField::band_limited(grid.clone(), 3, &mut rng).scale(0.5);
        let spec_q = f.partial_q();
        let fd_q = fd::fd_deriv_q(&f.values, grid.dq());
        let err = (&spec_q.values - &fd_q)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-6, "spectral vs FD mismatch {err}");
        let spec_p = f.partial_p();
        let fd_p = fd::fd_deriv_p(&f.values, grid.dp());
        let err = (&spec_p.values - &fd_p)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-6, "spectral vs FD mismatch {err}");
    }

    #[test]
    fn canonical_bracket_of_coordinates() {
        let grid = grid64();
        let q = ScalarField::coord_q(grid.clone());
        let p = ScalarField::coord_p(grid);
        let b = poisson_bracket(&q, &p).unwrap();
        assert!(b.sub(&ScalarField::constant(q.grid().clone(), 1.0)).max_abs() == 0.0);
    }

    #[test]
    fn bracket_antisymmetry_on_equal_args() {
        let grid = grid64();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = ScalarField::band_limited(grid, 5, &mut rng);
        let b = poisson_bracket(&f, &f).unwrap();
        assert!(b.max_abs() < 1e-10);
    }

    #[test]
    fn bracket_qsq_with_p() {
        let grid = grid64();
        let q2 = ScalarField::from_poly(grid.clone(), Poly::monomial(2, 0, 1.0));
        let p = ScalarField::coord_p(grid.clone());
        let b = poisson_bracket(&q2, &p).unwrap();
        let exact = ScalarField::from_poly(grid, Poly::monomial(1, 0, 2.0));
        assert_eq!(b.sub(&exact).max_abs(), 0.0);
    }

    #[test]
    fn harmonic_hamiltonian_vector_field() {
        let grid = grid64();
        let h = ScalarField::from_poly(
            grid.clone(),
            Poly::from_terms([((2, 0), 0.5), ((0, 2), 0.5)]),
        );
        let x = hamiltonian_vector_field(&h);
        let p = ScalarField::coord_p(grid.clone());
        let q = ScalarField::coord_q(grid);
        assert_eq!(x.comp_q.sub(&p).max_abs(), 0.0);
        assert_eq!(x.comp_p.add(&q).max_abs(), 0.0);
    }

    #[test]
    fn hamiltonian_fields_are_divergence_free() {
        let grid = grid64();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = ScalarField::band_limited(grid, 5, &mut rng);
        let div = divergence(&hamiltonian_vector_field(&h)).unwrap();
        assert!(div.max_abs() < 1e-8, "div X_H = {}", div.max_abs());
    }

    #[test]
    fn gaussian_quadrature_is_normalized() {
        let grid = grid64();
        let norm = 1.0 / std::f64::consts::PI;
        let f = ScalarField::from_fn(grid, |q, p| norm * (-(q * q + p * p)).exp());
        assert_abs_diff_eq!(f.integrate(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn canonical_one_form_pointwise() {
        let grid = PhaseSpaceGrid::new(64, 64, -8.0, 8.0, -8.0, 8.0).unwrap();
        let a = canonical_one_form(&grid);
        // Grid point nearest (0.3, -1.2): values are (p, 0) there.
        let i = ((0.3 + 8.0) / grid.dq()).round() as usize;
        let j = ((-1.2 + 8.0) / grid.dp()).round() as usize;
        assert_abs_diff_eq!(a.comp_q.values[(i, j)], grid.p_at(j), epsilon = 1e-14);
        assert_eq!(a.comp_p.values[(i, j)], 0.0);
    }

    #[test]
    fn bracket_integrates_to_zero() {
        let grid = grid64();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let f = ScalarField::band_limited(grid.clone(), 4, &mut rng);
        let g = ScalarField::band_limited(grid, 4, &mut rng);
        let b = poisson_bracket(&f, &g).unwrap();
        assert!(b.integrate().abs() < 1e-8);
    }

    #[test]
    fn jacobi_identity_residual_small() {
        let grid = grid64();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let f = ScalarField::band_limited(grid.clone(), 3, &mut rng).scale(0.3);
        let g = ScalarField::band_limited(grid.clone(), 3, &mut rng).scale(0.3);
        let h = ScalarField::band_limited(grid, 3, &mut rng).scale(0.3);
        let cyc = |a: &ScalarField, b: &ScalarField, c: &ScalarField| {
            poisson_bracket(&poisson_bracket(a, b).unwrap(), c).unwrap()
        };
        let res = cyc(&f, &g, &h).add(&cyc(&g, &h, &f)).add(&cyc(&h, &f, &g));
        assert!(res.max_abs() < 1e-6, "Jacobi residual {}", res.max_abs());
    }

    #[test]
    fn symplectic_raise_of_canonical_one_form() {
        let grid = grid64();
        let v = symplectic_raise(&canonical_one_form(&grid));
        let p = ScalarField::coord_p(grid);
        assert_eq!(v.comp_q.max_abs(), 0.0);
        assert_eq!(v.comp_p.add(&p).max_abs(), 0.0);
    }

    #[test]
    fn complex_bracket_matches_real_parts() {
        let grid = grid64();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h = ScalarField::band_limited(grid.clone(), 4, &mut rng);
        let fr = ScalarField::band_limited(grid.clone(), 4, &mut rng);
        let fi = ScalarField::band_limited(grid, 4, &mut rng);
        let mut psi = ComplexField::from_real(&fr);
        psi.values.zip_mut_with(&fi.values, |z, &v| z.im = v);
        let b = poisson_bracket_sc(&h, &psi).unwrap();
        let br = poisson_bracket(&h, &fr).unwrap();
        let bi = poisson_bracket(&h, &fi).unwrap();
        assert!(b.re().sub(&br).max_abs() < 1e-10);
        assert!(b.im().sub(&bi).max_abs() < 1e-10);
    }

    #[test]
    fn grid_rejects_bad_dimensions() {
        assert!(PhaseSpaceGrid::square(6, 8.0).is_err());
        assert!(PhaseSpaceGrid::square(63, 8.0).is_err());
        assert!(PhaseSpaceGrid::new(64, 64, 1.0, -1.0, -8.0, 8.0).is_err());
    }

    #[test]
    fn quadrature_of_unit_field_is_box_area() {
        let grid = PhaseSpaceGrid::new(32, 64, -2.0, 3.0, 0.0, 4.0).unwrap();
        let one = ScalarField::constant(grid, 1.0);
        assert_abs_diff_eq!(one.integrate(), 20.0, epsilon = 1e-12);
    }
}
