//! Hybrid quantum-classical dynamics: the wave equation for C^n-valued
//! phase-space wavefunctions, the associated density operator and its
//! marginals, exact factorization and Berry geometry.

use ndarray::{Array2, Array3};
use num_complex::Complex64 as C64;

use crate::error::{Result, SimError};
use crate::field::{
    canonical_one_form, divergence, ensure_same_grid, poisson_bracket_cc, symplectic_raise,
    ComplexField, CovectorField, ScalarField,
};
use crate::grid::PhaseSpaceGrid;
use crate::matrix_field::MatrixField;
use std::sync::Arc;

/// C^n-valued wavefunction on phase space, stored per quantum component.
#[derive(Clone)]
pub struct HybridWavefunction {
    pub comps: Vec<ComplexField>,
    pub hbar: f64,
}

impl HybridWavefunction {
    pub fn new(comps: Vec<ComplexField>, hbar: f64) -> Self {
        assert!(!comps.is_empty(), "need at least one quantum component");
        assert!(hbar > 0.0, "hbar must be positive");
        Self { comps, hbar }
    }

    pub fn n(&self) -> usize {
        self.comps.len()
    }

    pub fn grid(&self) -> &Arc<PhaseSpaceGrid> {
        self.comps[0].grid()
    }

    pub fn norm_sq(&self) -> f64 {
        self.comps.iter().map(ComplexField::norm_sq).sum()
    }

    pub fn normalized(&self) -> Self {
        let s = C64::new(1.0 / self.norm_sq().sqrt(), 0.0);
        Self {
            comps: self.comps.iter().map(|c| c.scale(s)).collect(),
            hbar: self.hbar,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            comps: self
                .comps
                .iter()
                .zip(&other.comps)
                .map(|(a, b)| a.add(b))
                .collect(),
            hbar: self.hbar,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            comps: self
                .comps
                .iter()
                .zip(&other.comps)
                .map(|(a, b)| a.sub(b))
                .collect(),
            hbar: self.hbar,
        }
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            comps: self.comps.iter().map(|c| c.scale(s)).collect(),
            hbar: self.hbar,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().fold(0.0, |m, c| m.max(c.max_abs()))
    }

    /// Pointwise outer product Upsilon Upsilon^dagger.
    pub fn outer(&self) -> MatrixField {
        let n = self.n();
        let grid = self.grid().clone();
        let mut out = MatrixField::zeros(grid, n);
        for a in 0..n {
            for b in 0..n {
                let prod = self.comps[a].mul(&self.comps[b].conj());
                out.set_entry(a, b, &prod);
            }
        }
        out
    }

    pub fn as_array3(&self) -> Array3<C64> {
        let (nq, np) = self.grid().shape();
        Array3::from_shape_fn((nq, np, self.n()), |(i, j, a)| {
            self.comps[a].values[(i, j)]
        })
    }
}

/// Hamiltonian of the form H(z) = sum_k f_k(z) A_k with real scalar fields
/// f_k and constant Hermitian matrices A_k.
///
/// Every case in scope (classical H0 Id, constant matrices, spin-boson
/// couplings, polynomial couplings from the CLI) fits this shape, and it
/// keeps the exact-derivative path available whenever the coefficients are
/// polynomials.
pub struct HybridHamiltonian {
    terms: Vec<(ScalarField, Array2<C64>)>,
    n: usize,
}

impl HybridHamiltonian {
    pub fn from_terms(terms: Vec<(ScalarField, Array2<C64>)>) -> Result<Self> {
        assert!(!terms.is_empty(), "Hamiltonian needs at least one term");
        let n = terms[0].1.nrows();
        for (f, m) in &terms {
            ensure_same_grid(f.grid(), terms[0].0.grid())?;
            if m.nrows() != n || m.ncols() != n {
                return Err(SimError::WrongQuantumDimension {
                    expected: n,
                    found: m.nrows(),
                });
            }
            let mut dev = 0.0f64;
            for a in 0..n {
                for b in 0..n {
                    dev = dev.max((m[(a, b)] - m[(b, a)].conj()).norm());
                }
            }
            if dev > 1e-12 {
                return Err(SimError::NonHermitian(dev));
            }
        }
        Ok(Self { terms, n })
    }

    /// Purely classical Hamiltonian H0 Id.
    pub fn classical(h0: ScalarField, n: usize) -> Self {
        let mut id = Array2::from_elem((n, n), C64::new(0.0, 0.0));
        for a in 0..n {
            id[(a, a)] = C64::new(1.0, 0.0);
        }
        Self::from_terms(vec![(h0, id)]).expect("identity is Hermitian")
    }

    /// Constant matrix Hamiltonian.
    pub fn constant(grid: Arc<PhaseSpaceGrid>, m: Array2<C64>) -> Result<Self> {
        Self::from_terms(vec![(ScalarField::constant(grid, 1.0), m)])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn grid(&self) -> &Arc<PhaseSpaceGrid> {
        self.terms[0].0.grid()
    }

    pub fn terms(&self) -> &[(ScalarField, Array2<C64>)] {
        &self.terms
    }

    pub fn matrix_field(&self) -> MatrixField {
        let mut out = MatrixField::zeros(self.grid().clone(), self.n);
        for (f, m) in &self.terms {
            out = out.add(&MatrixField::scalar_times_matrix(f, m));
        }
        out
    }

    pub fn partial_q_field(&self) -> MatrixField {
        let mut out = MatrixField::zeros(self.grid().clone(), self.n);
        for (f, m) in &self.terms {
            out = out.add(&MatrixField::scalar_times_matrix(&f.partial_q(), m));
        }
        out
    }

    pub fn partial_p_field(&self) -> MatrixField {
        let mut out = MatrixField::zeros(self.grid().clone(), self.n);
        for (f, m) in &self.terms {
            out = out.add(&MatrixField::scalar_times_matrix(&f.partial_p(), m));
        }
        out
    }

    /// The scalar multiplier H - A . X_H of each term: f - p df/dp in the
    /// gauge A = (p, 0).
    fn term_potential(f: &ScalarField) -> ScalarField {
        let p = ScalarField::coord_p(f.grid().clone());
        f.sub(&p.mul(&f.partial_p()))
    }

    /// The full potential field H - A . X_H as a matrix field.
    pub fn potential_field(&self) -> MatrixField {
        let mut out = MatrixField::zeros(self.grid().clone(), self.n);
        for (f, m) in &self.terms {
            out = out.add(&MatrixField::scalar_times_matrix(&Self::term_potential(f), m));
        }
        out
    }
}

fn check_dims(h: &HybridHamiltonian, ups: &HybridWavefunction) -> Result<()> {
    ensure_same_grid(h.grid(), ups.grid())?;
    if h.n() != ups.n() {
        return Err(SimError::WrongQuantumDimension {
            expected: h.n(),
            found: ups.n(),
        });
    }
    Ok(())
}

/// Apply the hybrid Liouvillian:
/// i hbar {H, Upsilon} + (H - A . X_H) Upsilon,
/// with the matrix factors acting from the left.
pub fn hybrid_liouvillian_apply(
    h: &HybridHamiltonian,
    ups: &HybridWavefunction,
) -> Result<HybridWavefunction> {
    check_dims(h, ups)?;
    let n = ups.n();
    let grid = ups.grid().clone();
    let shape = grid.shape();
    let dq: Vec<ComplexField> = ups.comps.iter().map(ComplexField::partial_q).collect();
    let dp: Vec<ComplexField> = ups.comps.iter().map(ComplexField::partial_p).collect();

    let zero = Array2::from_elem(shape, C64::new(0.0, 0.0));
    let mut bracket = vec![zero.clone(); n];
    let mut potential = vec![zero; n];

    for (f, m) in h.terms() {
        let fq = f.partial_q();
        let fp = f.partial_p();
        let pot = HybridHamiltonian::term_potential(f);
        for a in 0..n {
            let mut mdq = Array2::from_elem(shape, C64::new(0.0, 0.0));
            let mut mdp = mdq.clone();
            let mut mups = mdq.clone();
            for b in 0..n {
                let coeff = m[(a, b)];
                if coeff == C64::new(0.0, 0.0) {
                    continue;
                }
                mdq.zip_mut_with(&dq[b].values, |acc, &v| *acc += coeff * v);
                mdp.zip_mut_with(&dp[b].values, |acc, &v| *acc += coeff * v);
                mups.zip_mut_with(&ups.comps[b].values, |acc, &v| *acc += coeff * v);
            }
            ndarray::Zip::from(&mut bracket[a])
                .and(&mdp)
                .and(&mdq)
                .and(&fq.values)
                .and(&fp.values)
                .for_each(|acc, &vp, &vq, &cq, &cp| *acc += vp * cq - vq * cp);
            ndarray::Zip::from(&mut potential[a])
                .and(&mups)
                .and(&pot.values)
                .for_each(|acc, &v, &c| *acc += v * c);
        }
    }

    let ihbar = C64::new(0.0, ups.hbar);
    let comps = bracket
        .into_iter()
        .zip(potential)
        .map(|(mut b, v)| {
            grid.dealias_c(&mut b);
            let field = ComplexField::from_values(grid.clone(), b).expect("shape from grid");
            field
                .scale(ihbar)
                .add(&ComplexField::from_values(grid.clone(), v).expect("shape from grid"))
        })
        .collect();
    Ok(HybridWavefunction {
        comps,
        hbar: ups.hbar,
    })
}

/// Time derivative of the hybrid wavefunction: (-i/hbar) L_H Upsilon.
pub fn wave_rhs(h: &HybridHamiltonian, ups: &HybridWavefunction) -> Result<HybridWavefunction> {
    Ok(hybrid_liouvillian_apply(h, ups)?.scale(C64::new(0.0, -1.0 / ups.hbar)))
}

/// Hybrid density operator
/// D = Upsilon Upsilon^dagger - div(J A Upsilon Upsilon^dagger)
///   + i hbar {Upsilon, Upsilon^dagger},
/// with the one-form term expanded by the product rule so the polynomial
/// components of A differentiate exactly.
pub fn hybrid_density_vanhove(ups: &HybridWavefunction) -> Result<MatrixField> {
    let m = ups.outer();
    let ja = symplectic_raise(&canonical_one_form(ups.grid()));
    let div_ja = divergence(&ja)?;
    let transport = m
        .mul_scalar(&div_ja)
        .add(&m.partial_q().mul_scalar(&ja.comp_q))
        .add(&m.partial_p().mul_scalar(&ja.comp_p));
    let n = ups.n();
    let mut circ = MatrixField::zeros(ups.grid().clone(), n);
    let ihbar = C64::new(0.0, ups.hbar);
    for a in 0..n {
        for b in 0..n {
            let entry =
                poisson_bracket_cc(&ups.comps[a], &ups.comps[b].conj())?.scale(ihbar);
            circ.set_entry(a, b, &entry);
        }
    }
    Ok(m.sub(&transport).add(&circ))
}

/// Quantum marginal: the n x n density matrix obtained by integrating the
/// density field over phase space.
pub fn quantum_density(dhat: &MatrixField) -> Array2<C64> {
    dhat.integrate()
}

/// Classical marginal: the pointwise trace of the density field.
pub fn classical_density(dhat: &MatrixField) -> ScalarField {
    dhat.trace_re()
}

/// Exact-factorization data Upsilon = chi psi with the real gauge
/// chi = |Upsilon|.
pub struct FactorizationData {
    pub chi: ComplexField,
    pub psi: Vec<ComplexField>,
    pub mask: Array2<bool>,
}

/// Split the wavefunction into a classical amplitude and a unit conditional
/// state. Outside the mask (where |Upsilon| <= floor) psi is set to the
/// first basis vector.
pub fn exact_factorize(ups: &HybridWavefunction, floor: f64) -> Result<FactorizationData> {
    let grid = ups.grid().clone();
    let (nq, np) = grid.shape();
    let n = ups.n();
    let mut chi = Array2::from_elem((nq, np), C64::new(0.0, 0.0));
    let mut psi = vec![Array2::from_elem((nq, np), C64::new(0.0, 0.0)); n];
    let mut mask = Array2::from_elem((nq, np), false);
    let mut any = false;
    for i in 0..nq {
        for j in 0..np {
            let norm = (0..n)
                .map(|a| ups.comps[a].values[(i, j)].norm_sqr())
                .sum::<f64>()
                .sqrt();
            chi[(i, j)] = C64::new(norm, 0.0);
            if norm > floor {
                mask[(i, j)] = true;
                any = true;
                for (a, comp) in psi.iter_mut().enumerate() {
                    comp[(i, j)] = ups.comps[a].values[(i, j)] / norm;
                }
            } else {
                psi[0][(i, j)] = C64::new(1.0, 0.0);
            }
        }
    }
    if !any {
        return Err(SimError::EmptyMask);
    }
    Ok(FactorizationData {
        chi: ComplexField::from_values(grid.clone(), chi).expect("shape from grid"),
        psi: psi
            .into_iter()
            .map(|v| ComplexField::from_values(grid.clone(), v).expect("shape from grid"))
            .collect(),
        mask,
    })
}

fn check_unit(psi: &[ComplexField]) -> Result<()> {
    let mut dev = 0.0f64;
    let shape = psi[0].grid().shape();
    for i in 0..shape.0 {
        for j in 0..shape.1 {
            let norm: f64 = psi.iter().map(|c| c.values[(i, j)].norm_sqr()).sum();
            dev = dev.max((norm - 1.0).abs());
        }
    }
    if dev > 1e-8 {
        return Err(SimError::NotNormalized(dev));
    }
    Ok(())
}

/// Berry connection A_B = <psi, -i hbar d psi> (real part).
pub fn berry_connection(psi: &[ComplexField], hbar: f64) -> Result<CovectorField> {
    check_unit(psi)?;
    let grid = psi[0].grid().clone();
    let mut comp_q = ScalarField::zeros(grid.clone());
    let mut comp_p = ScalarField::zeros(grid);
    for c in psi {
        comp_q = comp_q.add(&c.conj().mul(&c.partial_q()).im().scale(hbar));
        comp_p = comp_p.add(&c.conj().mul(&c.partial_p()).im().scale(hbar));
    }
    Ok(CovectorField { comp_q, comp_p })
}

/// Berry curvature from the conditional state: B = d A_B.
pub fn berry_curvature_from_psi(psi: &[ComplexField], hbar: f64) -> Result<ScalarField> {
    let conn = berry_connection(psi, hbar)?;
    Ok(conn.comp_p.partial_q().sub(&conn.comp_q.partial_p()))
}

/// Berry curvature from a pointwise-normalized density matrix field:
/// B = -i hbar Tr(rho [d_q rho, d_p rho]).
pub fn berry_curvature_from_rho(rho: &MatrixField, hbar: f64) -> ScalarField {
    let comm = rho.partial_q().commutator(&rho.partial_p());
    rho.matmul(&comm)
        .trace()
        .scale(C64::new(0.0, -hbar))
        .re()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvh::{momentum_map_j, prequantum_apply, KoopmanWavefunction};
    use crate::matrix_field::pauli;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid64() -> Arc<PhaseSpaceGrid> {
        PhaseSpaceGrid::square(64, 8.0).unwrap()
    }

    fn random_state(
        grid: &Arc<PhaseSpaceGrid>,
        n: usize,
        hbar: f64,
        rng: &mut impl Rng,
    ) -> HybridWavefunction {
        let comps = (0..n)
            .map(|_| ComplexField::band_limited(grid.clone(), 4, rng))
            .collect();
        HybridWavefunction::new(comps, hbar)
    }

    fn gaussian(grid: &Arc<PhaseSpaceGrid>) -> ComplexField {
        // Wide in real space so the spectral tail at the Nyquist mode is far
        // below the quadrature tolerances used against it.
        ComplexField::from_fn(grid.clone(), |q, p| {
            C64::new((-((q - 0.8).powi(2) + (p + 0.3).powi(2)) / 4.0).exp(), 0.0)
        })
    }

    #[test]
    fn single_level_reduces_to_prequantum_operator() {
        let grid = grid64();
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let h0 = ScalarField::band_limited(grid.clone(), 4, &mut rng);
        let psi = ComplexField::band_limited(grid.clone(), 4, &mut rng);
        let hbar = 0.8;
        let hyb = HybridHamiltonian::classical(h0.clone(), 1);
        let ups = HybridWavefunction::new(vec![psi.clone()], hbar);
        let out = hybrid_liouvillian_apply(&hyb, &ups).unwrap();
        let scalar = prequantum_apply(&h0, &KoopmanWavefunction::new(psi, hbar)).unwrap();
        let diff = out.comps[0].sub(&scalar).max_abs();
        assert_eq!(diff, 0.0, "n=1 reduction must be bit-compatible");
    }

    #[test]
    fn constant_matrix_acts_by_multiplication() {
        let grid = grid64();
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let ups = random_state(&grid, 2, 1.0, &mut rng);
        let m = pauli(1) + pauli(3).mapv(|z| z * C64::new(0.5, 0.0));
        let h = HybridHamiltonian::constant(grid, m.clone()).unwrap();
        let out = hybrid_liouvillian_apply(&h, &ups).unwrap();
        for a in 0..2 {
            let expected = ups.comps[0]
                .scale(m[(a, 0)])
                .add(&ups.comps[1].scale(m[(a, 1)]));
            assert!(out.comps[a].sub(&expected).max_abs() < 1e-12);
        }
    }

    #[test]
    fn liouvillian_generates_norm_preserving_flow() {
        let grid = grid64();
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let h = HybridHamiltonian::from_terms(vec![
            (ScalarField::band_limited(grid.clone(), 3, &mut rng), pauli(0)),
            (ScalarField::band_limited(grid.clone(), 3, &mut rng), pauli(1)),
            (ScalarField::band_limited(grid.clone(), 3, &mut rng), pauli(3)),
        ])
        .unwrap();
        let ups = random_state(&grid, 2, 1.0, &mut rng);
        let rhs = wave_rhs(&h, &ups).unwrap();
        let mut drift = 0.0;
        for a in 0..2 {
            drift += ups.comps[a].inner(&rhs.comps[a]).re;
        }
        assert!(
            drift.abs() < 1e-10 * ups.norm_sq(),
            "norm drift {drift}"
        );
    }

    #[test]
    fn non_hermitian_hamiltonian_rejected() {
        let grid = grid64();
        let mut m = pauli(1);
        m[(0, 1)] += C64::new(0.0, 0.3);
        let err = HybridHamiltonian::constant(grid, m);
        assert!(matches!(err, Err(SimError::NonHermitian(_))));
    }

    #[test]
    fn single_level_density_reduces_to_momentum_map() {
        let grid = grid64();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let psi = ComplexField::band_limited(grid, 4, &mut rng);
        let hbar = 1.1;
        let ups = HybridWavefunction::new(vec![psi.clone()], hbar);
        let dhat = hybrid_density_vanhove(&ups).unwrap();
        let rho = momentum_map_j(&KoopmanWavefunction::new(psi, hbar)).unwrap();
        let diff = dhat.entry(0, 0).re().sub(&rho).max_abs();
        assert_eq!(diff, 0.0, "n=1 density must be bit-compatible");
    }

    #[test]
    fn product_state_density_factorizes() {
        let grid = grid64();
        let psi = gaussian(&grid);
        let hbar = 1.0;
        let v = [C64::new(0.6, 0.0), C64::new(0.0, 0.8)];
        let ups = HybridWavefunction::new(vec![psi.scale(v[0]), psi.scale(v[1])], hbar);
        let dhat = hybrid_density_vanhove(&ups).unwrap();
        let rho = momentum_map_j(&KoopmanWavefunction::new(psi, hbar)).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let expected = ComplexField::from_real(&rho).scale(v[a] * v[b].conj());
                assert!(
                    dhat.entry(a, b).sub(&expected).max_abs() < 1e-12,
                    "entry ({a},{b})"
                );
            }
        }
    }

    #[test]
    fn density_trace_matches_total_norm() {
        let grid = grid64();
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let envelope = gaussian(&grid);
        let comps = (0..2)
            .map(|_| envelope.mul(&ComplexField::band_limited(grid.clone(), 3, &mut rng)))
            .collect();
        let ups = HybridWavefunction::new(comps, 1.0).normalized();
        let dhat = hybrid_density_vanhove(&ups).unwrap();
        let total = quantum_density(&dhat);
        let trace = total[(0, 0)].re + total[(1, 1)].re;
        assert_abs_diff_eq!(trace, ups.norm_sq(), epsilon = 1e-8);
        assert_abs_diff_eq!(
            classical_density(&dhat).integrate(),
            ups.norm_sq(),
            epsilon = 1e-8
        );
    }

    #[test]
    fn quantum_density_drops_correction_terms() {
        // The one-form and circulation corrections integrate to zero, so the
        // quantum marginal equals the plain outer-product integral.
        let grid = grid64();
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let envelope = gaussian(&grid);
        let comps: Vec<ComplexField> = (0..2)
            .map(|_| {
                let mod_field = ComplexField::band_limited(grid.clone(), 3, &mut rng);
                envelope.mul(&mod_field)
            })
            .collect();
        let ups = HybridWavefunction::new(comps, 1.0).normalized();
        let dhat = hybrid_density_vanhove(&ups).unwrap();
        let lhs = quantum_density(&dhat);
        let rhs = ups.outer().integrate();
        let mut dev = 0.0f64;
        for a in 0..2 {
            for b in 0..2 {
                dev = dev.max((lhs[(a, b)] - rhs[(a, b)]).norm());
            }
        }
        assert!(dev < 1e-8, "correction leakage {dev}");
    }

    #[test]
    fn mixed_two_branch_state_gives_maximally_mixed_marginal() {
        let grid = grid64();
        // Orthogonal branches: even and odd classical profiles.
        let even = ComplexField::from_fn(grid.clone(), |q, p| {
            C64::new((-(q * q + p * p)).exp(), 0.0)
        });
        let odd = ComplexField::from_fn(grid.clone(), |q, p| {
            C64::new(q * (-(q * q + p * p)).exp(), 0.0)
        });
        let e = even.scale(C64::new(1.0 / even.norm_sq().sqrt(), 0.0));
        let o = odd.scale(C64::new(1.0 / odd.norm_sq().sqrt(), 0.0));
        let ups = HybridWavefunction::new(vec![e, o], 1.0).normalized();
        let rho = quantum_density(&hybrid_density_vanhove(&ups).unwrap());
        assert_abs_diff_eq!(rho[(0, 0)].re, 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(rho[(1, 1)].re, 0.5, epsilon = 1e-8);
        assert!(rho[(0, 1)].norm() < 1e-8);
    }

    #[test]
    fn factorization_reconstructs_the_state() {
        let grid = grid64();
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let envelope = gaussian(&grid);
        let comps: Vec<ComplexField> = (0..2)
            .map(|_| envelope.mul(&ComplexField::band_limited(grid.clone(), 2, &mut rng)))
            .collect();
        let ups = HybridWavefunction::new(comps, 1.0);
        let fac = exact_factorize(&ups, 1e-12).unwrap();
        let mut recon_err = 0.0f64;
        let mut unit_err = 0.0f64;
        for (idx, &m) in fac.mask.indexed_iter() {
            if !m {
                continue;
            }
            let mut norm = 0.0;
            for a in 0..2 {
                let built = fac.chi.values[idx] * fac.psi[a].values[idx];
                recon_err = recon_err.max((built - ups.comps[a].values[idx]).norm());
                norm += fac.psi[a].values[idx].norm_sqr();
            }
            unit_err = unit_err.max((norm - 1.0).abs());
        }
        assert!(recon_err < 1e-12, "reconstruction error {recon_err}");
        assert!(unit_err < 1e-14, "conditional norm error {unit_err}");
    }

    #[test]
    fn factorization_of_product_state() {
        let grid = grid64();
        let psi = gaussian(&grid);
        let v = [C64::new(0.6, 0.0), C64::new(0.8, 0.0)];
        let ups = HybridWavefunction::new(vec![psi.scale(v[0]), psi.scale(v[1])], 1.0);
        let fac = exact_factorize(&ups, 1e-10).unwrap();
        for (idx, &m) in fac.mask.indexed_iter() {
            if m {
                assert!((fac.psi[0].values[idx] - C64::new(0.6, 0.0)).norm() < 1e-12);
                assert!((fac.psi[1].values[idx] - C64::new(0.8, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_state_has_no_factorization() {
        let grid = grid64();
        let zero = ComplexField::zeros(grid);
        let ups = HybridWavefunction::new(vec![zero.clone(), zero], 1.0);
        assert!(matches!(
            exact_factorize(&ups, 1e-12),
            Err(SimError::EmptyMask)
        ));
    }

    #[test]
    fn berry_connection_of_constant_state_vanishes() {
        let grid = grid64();
        let psi = vec![
            ComplexField::from_fn(grid.clone(), |_, _| C64::new(0.6, 0.0)),
            ComplexField::from_fn(grid, |_, _| C64::new(0.0, 0.8)),
        ];
        let conn = berry_connection(&psi, 1.0).unwrap();
        assert!(conn.comp_q.max_abs() < 1e-14);
        assert!(conn.comp_p.max_abs() < 1e-14);
        let curv = berry_curvature_from_psi(&psi, 1.0).unwrap();
        assert!(curv.max_abs() < 1e-14);
    }

    #[test]
    fn pure_gauge_state_has_flat_connection() {
        let grid = grid64();
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        let phi = ScalarField::band_limited(grid.clone(), 3, &mut rng).scale(0.05);
        let hbar = 0.9;
        let psi: Vec<ComplexField> = [C64::new(0.6, 0.0), C64::new(0.0, 0.8)]
            .iter()
            .map(|&v| {
                let mut f = ComplexField::from_fn(grid.clone(), |_, _| v);
                f.values.zip_mut_with(&phi.values, |z, &s| {
                    *z *= C64::new(0.0, s).exp();
                });
                f
            })
            .collect();
        let conn = berry_connection(&psi, hbar).unwrap();
        // A_B = hbar d phi, a pure gauge.
        let expected_q = phi.partial_q().scale(hbar);
        let expected_p = phi.partial_p().scale(hbar);
        assert!(conn.comp_q.sub(&expected_q).max_abs() < 1e-6);
        assert!(conn.comp_p.sub(&expected_p).max_abs() < 1e-6);
        let curv = berry_curvature_from_psi(&psi, hbar).unwrap();
        assert!(curv.max_abs() < 1e-6, "pure gauge curvature {}", curv.max_abs());
    }

    #[test]
    fn berry_rejects_unnormalized_input() {
        let grid = grid64();
        let psi = vec![ComplexField::from_fn(grid, |_, _| C64::new(0.3, 0.0))];
        assert!(matches!(
            berry_connection(&psi, 1.0),
            Err(SimError::NotNormalized(_))
        ));
    }

    fn smoothstep(x: f64) -> f64 {
        // Smooth (C-infinity) step on [0,1], flat at both ends.
        if x <= 0.0 {
            0.0
        } else if x >= 1.0 {
            1.0
        } else {
            let f = |y: f64| (-1.0 / y).exp();
            f(x) / (f(x) + f(1.0 - x))
        }
    }

    fn bloch_cap_state(grid: &Arc<PhaseSpaceGrid>, theta_c: f64) -> Vec<ComplexField> {
        // theta rises to theta_c inside r < 2.8, is flat on the annulus
        // 2.8 <= r <= 3.6 (where the curvature vanishes) and returns to zero
        // by r = 4.8, so the state is smooth and periodic.
        let profile = |r: f64| {
            if r < 2.8 {
                theta_c * smoothstep(r / 2.8)
            } else if r < 3.6 {
                theta_c
            } else {
                theta_c * smoothstep((4.8 - r) / 1.2)
            }
        };
        let up = ComplexField::from_fn(grid.clone(), |q, p| {
            let r = q.hypot(p);
            C64::new((profile(r) / 2.0).cos(), 0.0)
        });
        let down = ComplexField::from_fn(grid.clone(), |q, p| {
            let r = q.hypot(p);
            let phi = p.atan2(q);
            C64::new(0.0, phi).exp() * (profile(r) / 2.0).sin()
        });
        vec![up, down]
    }

    #[test]
    fn berry_flux_matches_solid_angle() {
        let grid = PhaseSpaceGrid::square(192, 8.0).unwrap();
        let hbar = 1.0;
        let theta_c = 1.1;
        let psi = bloch_cap_state(&grid, theta_c);
        let curv = berry_curvature_from_psi(&psi, hbar).unwrap();
        // Integrate over r < 3.2; the boundary circle lies in the flat
        // annulus, so the discrete mask causes no staircase error.
        let mut flux = 0.0;
        for (idx, v) in curv.values.indexed_iter() {
            let (q, p) = (grid.q_at(idx.0), grid.p_at(idx.1));
            if q.hypot(p) < 3.2 {
                flux += v;
            }
        }
        flux *= grid.cell_area();
        let solid_angle = std::f64::consts::TAU * (1.0 - theta_c.cos());
        let expected = 0.5 * hbar * solid_angle;
        assert!(
            (flux - expected).abs() < 1e-4 * expected.abs(),
            "flux {flux} vs solid-angle value {expected}"
        );
    }

    #[test]
    fn berry_curvature_paths_agree_for_pure_states() {
        // A band-limited Bloch field keeps both discretizations in their
        // convergent regime; the cap state's sharp profile would only test
        // truncation error.
        let grid = PhaseSpaceGrid::square(96, 8.0).unwrap();
        let hbar = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(131);
        let theta = ScalarField::band_limited(grid.clone(), 2, &mut rng)
            .scale(0.1)
            .map(|v| 1.0 + v);
        let phi = ScalarField::band_limited(grid.clone(), 2, &mut rng).scale(0.1);
        let up = ComplexField::from_fn(grid.clone(), |_, _| C64::new(0.0, 0.0));
        let mut psi = vec![up.clone(), up];
        for (idx, &t) in theta.values.indexed_iter() {
            let f = phi.values[idx];
            psi[0].values[idx] = C64::new((t / 2.0).cos(), 0.0);
            psi[1].values[idx] = C64::new(0.0, f).exp() * (t / 2.0).sin();
        }
        let from_psi = berry_curvature_from_psi(&psi, hbar).unwrap();
        let mut rho = MatrixField::zeros(grid, 2);
        for a in 0..2 {
            for b in 0..2 {
                rho.set_entry(a, b, &psi[a].mul(&psi[b].conj()));
            }
        }
        let from_rho = berry_curvature_from_rho(&rho, hbar);
        let scale = from_psi.max_abs().max(1e-12);
        assert!(
            from_psi.sub(&from_rho).max_abs() < 1e-6 * scale,
            "path mismatch {} (scale {scale})",
            from_psi.sub(&from_rho).max_abs()
        );
    }

    #[test]
    fn factorized_classical_marginal_identity() {
        // With Upsilon = chi psi the classical marginal satisfies
        // rho_c = D + div(J(sigma + D A_B - D A)), D = |chi|^2,
        // sigma = hbar Im(conj(chi) d chi). The A term is expanded exactly.
        let grid = PhaseSpaceGrid::square(96, 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(127);
        let hbar = 1.0;
        let envelope = ComplexField::from_fn(grid.clone(), |q, p| {
            C64::new((-0.5 * ((q - 0.6).powi(2) + p * p)).exp(), 0.0)
        });
        // The spinor angles decay with the envelope so the conditional state
        // approaches a constant at large radius and stays globally smooth.
        let decay = ScalarField::from_fn(grid.clone(), |q, p| (-0.25 * (q * q + p * p)).exp());
        let alpha = ScalarField::band_limited(grid.clone(), 2, &mut rng)
            .scale(0.03)
            .mul(&decay);
        let beta = ScalarField::band_limited(grid.clone(), 2, &mut rng)
            .scale(0.03)
            .mul(&decay);
        let up = ComplexField::from_fn(grid.clone(), |_, _| C64::new(1.0, 0.0));
        let mut comps = vec![up.clone(), ComplexField::zeros(grid.clone())];
        for (idx, z) in envelope.values.indexed_iter() {
            let a = alpha.values[idx];
            let b = beta.values[idx];
            comps[0].values[idx] = *z * C64::new(a.cos(), 0.0);
            comps[1].values[idx] = *z * C64::new(0.0, b).exp() * a.sin();
        }
        let ups = HybridWavefunction::new(comps, hbar).normalized();

        let rho_c = classical_density(&hybrid_density_vanhove(&ups).unwrap());

        let fac = exact_factorize(&ups, 1e-9).unwrap();
        let d = fac.chi.abs_sq();
        let sigma_q = fac.chi.conj().mul(&fac.chi.partial_q()).im().scale(hbar);
        let sigma_p = fac.chi.conj().mul(&fac.chi.partial_p()).im().scale(hbar);
        let ab = berry_connection(&fac.psi, hbar).unwrap();
        // sigma + D A_B decays with D, so its divergence is taken directly;
        // the -D A term is expanded through the polynomial path.
        let decaying = CovectorField {
            comp_q: sigma_q.add(&d.mul(&ab.comp_q)),
            comp_p: sigma_p.add(&d.mul(&ab.comp_p)),
        };
        let ja = symplectic_raise(&canonical_one_form(&d.grid().clone()));
        let div_ja = divergence(&ja).unwrap();
        let a_part = d
            .mul(&div_ja)
            .add(&ja.comp_q.mul(&d.partial_q()))
            .add(&ja.comp_p.mul(&d.partial_p()));
        let expected = d
            .add(&divergence(&symplectic_raise(&decaying)).unwrap())
            .sub(&a_part);
        let scale = rho_c.max_abs();
        assert!(
            rho_c.sub(&expected).max_abs() < 1e-6 * scale,
            "factorized marginal mismatch {}",
            rho_c.sub(&expected).max_abs()
        );
    }
}
