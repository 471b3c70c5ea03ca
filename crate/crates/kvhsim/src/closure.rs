//! Variational closure model: positive classical density coupled to a
//! positive quantum density matrix through the matrix-valued phase-space
//! density P(z).
//!
//! The evolution can be written either in the single-variable form
//!     ih dP/dt + ih div(P <X_{dH/dP}>) = [dH/dP, P]
//! or as the equivalent (D, P) pair of an advection equation for D = Tr P
//! plus a Landau-Lifshitz-type equation for P.  Both are implemented; the
//! single-variable form is the default propagator and the split form is a
//! cross-check.
//!
//! Discretization rule used throughout: derivatives of quotients by D are
//! expanded with the chain rule before discretization, so the spectral
//! transform is only ever applied to decaying fields (P, D and brackets
//! built from them).  The regularized reciprocal w = 1/sqrt(D^2 + eps^2)
//! and its pointwise slope enter as multipliers only.  This form keeps w
//! monotone decreasing in D everywhere, so low-density regions never see a
//! sign-flipped slope (the quotient form D/(D^2+eps^2) does flip below eps,
//! which anti-diffuses the density nulls that open up once the state
//! decoheres and blows the run up).

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64 as C64;

use crate::error::{Result, SimError};
use crate::field::{ComplexField, PhaseVectorField, ScalarField};
use crate::grid::PhaseSpaceGrid;
use crate::hybrid::HybridHamiltonian;
use crate::matrix_field::{constant_matrix_field, MatrixField};

/// Fraction of the total mass allowed to sit where D is below the
/// regularization scale before the state is considered degenerate.
const DEGENERATE_MASS_FRACTION: f64 = 1e-3;

/// Matrix-valued density state for the closure model.
#[derive(Clone)]
pub struct ClosureState {
    pub p: MatrixField,
    pub hbar: f64,
    pub d_floor: f64,
}

impl ClosureState {
    pub fn new(p: MatrixField, hbar: f64, d_floor: f64) -> Result<Self> {
        let dev = p.hermitian_deviation();
        let scale = p.max_abs().max(1.0);
        if dev > 1e-10 * scale {
            return Err(SimError::NonHermitian(dev));
        }
        Ok(Self { p, hbar, d_floor })
    }

    /// Rank-one construction P = D psi psi^dagger from a nonnegative density
    /// and a pointwise-normalized conditional state.
    pub fn pure(
        d0: &ScalarField,
        psi0: &[ComplexField],
        hbar: f64,
        d_floor: f64,
    ) -> Result<Self> {
        let grid = d0.grid().clone();
        let n = psi0.len();
        if n == 0 {
            return Err(SimError::WrongQuantumDimension {
                expected: 1,
                found: 0,
            });
        }
        let mut norm_dev = 0.0f64;
        let (nq, np) = grid.shape();
        for i in 0..nq {
            for j in 0..np {
                let s: f64 = psi0.iter().map(|c| c.values[(i, j)].norm_sqr()).sum();
                norm_dev = norm_dev.max((s - 1.0).abs());
            }
        }
        if norm_dev > 1e-8 {
            return Err(SimError::NotNormalized(norm_dev));
        }
        if d0.min() < -1e-12 * d0.max_abs().max(1.0) {
            return Err(SimError::DegenerateDensity(format!(
                "initial density has min {:.3e}",
                d0.min()
            )));
        }
        let mut p = MatrixField::zeros(grid, n);
        for a in 0..n {
            for b in 0..n {
                let mut e = psi0[a].mul(&psi0[b].conj());
                e = e.mul_real(d0);
                p.set_entry(a, b, &e);
            }
        }
        Self::new(p, hbar, d_floor)
    }

    pub fn grid(&self) -> &Arc<PhaseSpaceGrid> {
        self.p.grid()
    }

    pub fn n(&self) -> usize {
        self.p.dim()
    }

    /// Classical density D = Tr P.
    pub fn density(&self) -> ScalarField {
        self.p.trace_re()
    }

    pub fn total_mass(&self) -> f64 {
        self.density().integrate()
    }

    pub fn min_density(&self) -> f64 {
        self.density().min()
    }

    /// Quantum density matrix rho_q = integral of P.
    pub fn quantum_density(&self) -> Array2<C64> {
        self.p.integrate()
    }

    /// Purity Tr(rho_q^2) of the quantum marginal.
    pub fn purity(&self) -> f64 {
        let rho = self.quantum_density();
        let n = rho.nrows();
        let mut s = C64::new(0.0, 0.0);
        for a in 0..n {
            for b in 0..n {
                s += rho[(a, b)] * rho[(b, a)];
            }
        }
        s.re
    }

    /// Diagnostic: max over the effective support of ||rho^2 - rho|| for the
    /// normalized conditional state rho = P/D.  Zero for pointwise-pure states.
    pub fn purity_defect(&self) -> f64 {
        let d = self.density();
        let w = regularized_inverse(&d, self.d_floor);
        let rho = self.p.mul_scalar(&w);
        let dev = rho.matmul(&rho).sub(&rho);
        dev.max_abs()
    }
}

/// Regularized reciprocal of the classical density:
/// 1/D -> 1/sqrt(D^2 + eps^2) with eps = d_floor * max(D).
pub fn regularized_inverse(d: &ScalarField, d_floor: f64) -> ScalarField {
    let eps = d_floor * d.max_abs();
    if eps <= 0.0 {
        return ScalarField::zeros(d.grid().clone());
    }
    let e2 = eps * eps;
    d.map(|x| 1.0 / (x * x + e2).sqrt())
}

/// Pointwise slope of the regularized reciprocal with respect to D, used to
/// expand derivatives of w by the chain rule.
pub(crate) fn regularized_inverse_slope(d: &ScalarField, d_floor: f64) -> ScalarField {
    let eps = d_floor * d.max_abs();
    if eps <= 0.0 {
        return ScalarField::zeros(d.grid().clone());
    }
    let e2 = eps * eps;
    d.map(|x| {
        let den = x * x + e2;
        -x / (den * den.sqrt())
    })
}

/// Pointwise derivative of the regularized reciprocal with respect to the
/// regularization scale eps itself.  Because eps = d_floor * max(D) tracks
/// the state, energy functionals built on w pick up a contribution through
/// the density value at the argmax; the sensitivity functions below expose
/// it so that variational identities can be checked exactly.
pub(crate) fn regularized_inverse_eps_slope(d: &ScalarField, d_floor: f64) -> ScalarField {
    let eps = d_floor * d.max_abs();
    if eps <= 0.0 {
        return ScalarField::zeros(d.grid().clone());
    }
    let e2 = eps * eps;
    d.map(|x| {
        let den = x * x + e2;
        -eps / (den * den.sqrt())
    })
}

/// Pointwise second derivative of the regularized reciprocal with respect
/// to D.
pub(crate) fn regularized_inverse_curvature(d: &ScalarField, d_floor: f64) -> ScalarField {
    let eps = d_floor * d.max_abs();
    if eps <= 0.0 {
        return ScalarField::zeros(d.grid().clone());
    }
    let e2 = eps * eps;
    d.map(|x| {
        let den = x * x + e2;
        (2.0 * x * x - e2) / (den * den * den.sqrt())
    })
}

/// Analytic second partials (H_qq, H_qp, H_pp) of the Hamiltonian matrix.
fn hamiltonian_second_partials(
    h: &HybridHamiltonian,
) -> (MatrixField, MatrixField, MatrixField) {
    let grid = h.grid().clone();
    let n = h.n();
    let mut hqq = MatrixField::zeros(grid.clone(), n);
    let mut hqp = MatrixField::zeros(grid.clone(), n);
    let mut hpp = MatrixField::zeros(grid, n);
    for (f, m) in h.terms() {
        let fq = f.partial_q();
        let fp = f.partial_p();
        hqq = hqq.add(&MatrixField::scalar_times_matrix(&fq.partial_q(), m));
        hqp = hqp.add(&MatrixField::scalar_times_matrix(&fq.partial_p(), m));
        hpp = hpp.add(&MatrixField::scalar_times_matrix(&fp.partial_p(), m));
    }
    (hqq, hqp, hpp)
}

pub(crate) fn check_degenerate(d: &ScalarField, d_floor: f64) -> Result<()> {
    let eps = d_floor * d.max_abs();
    let total = d.integrate();
    if total <= 0.0 {
        return Err(SimError::DegenerateDensity(
            "total mass is not positive".into(),
        ));
    }
    let below = d.map(|x| if x < eps { x.abs() } else { 0.0 }).integrate();
    if below > DEGENERATE_MASS_FRACTION * total.abs() {
        return Err(SimError::DegenerateDensity(format!(
            "mass fraction {:.3e} sits below the regularization scale",
            below / total
        )));
    }
    Ok(())
}

/// Functional derivatives of the closure Hamiltonian.
///
/// `dh_dp` is the derivative of the single-variable functional H(P); `dh_dd`
/// is the D-derivative of the equivalent two-variable functional h(D, P).
/// The split P-derivative is recovered exactly as dh_dp - dh_dd * Id.
#[derive(Clone)]
pub struct ClosureDerivatives {
    pub dh_dp: MatrixField,
    pub dh_dd: ScalarField,
}

impl ClosureDerivatives {
    /// delta h / delta P of the (D, P) split form.
    pub fn dh_dp_split(&self) -> MatrixField {
        let n = self.dh_dp.dim();
        self.dh_dp
            .sub(&MatrixField::scalar_times_identity(&self.dh_dd, n))
    }
}

/// Shared intermediates for one right-hand-side evaluation.
pub(crate) struct ClosureKit {
    pub hbar: f64,
    pub d: ScalarField,
    /// w * D, the regularized expectation of the identity.
    pub wd: ScalarField,
    /// Split derivative A = delta h / delta P.
    pub a: MatrixField,
    /// Expanded partials of A.
    pub aq: MatrixField,
    pub ap: MatrixField,
    /// Full derivative delta H / delta P = A + dh_dd * Id.
    pub dh_dp: MatrixField,
    pub dh_dd: ScalarField,
    pub dh_dd_q: ScalarField,
    pub dh_dd_p: ScalarField,
    /// Expectations <dA/dq>, <dA/dp>.
    pub exq: ScalarField,
    pub exp: ScalarField,
}

fn expect_of(p: &MatrixField, w: &ScalarField, a: &MatrixField) -> ScalarField {
    p.matmul(a).trace().re().mul(w)
}

pub(crate) fn build_kit(h: &HybridHamiltonian, st: &ClosureState) -> Result<ClosureKit> {
    st.p.check_compatible(&constant_matrix_field(
        h.grid().clone(),
        &Array2::eye(h.n()),
    ))?;
    let hbar = st.hbar;
    let n = st.n();
    let p = &st.p;
    let d = st.density();
    check_degenerate(&d, st.d_floor)?;

    let hmat = h.matrix_field();
    let hq = h.partial_q_field();
    let hp = h.partial_p_field();

    let (hqq, hqp, hpp) = hamiltonian_second_partials(h);

    let pq = p.partial_q();
    let pp = p.partial_p();
    let dq = d.partial_q();
    let dp = d.partial_p();
    let dqq = dq.partial_q();
    let dqp = dq.partial_p();
    let dpp = dp.partial_p();

    let w = regularized_inverse(&d, st.d_floor);
    let wslope = regularized_inverse_slope(&d, st.d_floor);
    let wcurv = regularized_inverse_curvature(&d, st.d_floor);
    let wq = wslope.mul(&dq);
    let wp = wslope.mul(&dp);
    let wqq = wcurv.mul(&dq).mul(&dq).add(&wslope.mul(&dqq));
    let wqp = wcurv.mul(&dq).mul(&dp).add(&wslope.mul(&dqp));
    let wpp = wcurv.mul(&dp).mul(&dp).add(&wslope.mul(&dpp));
    let wd = w.mul(&d);

    // Sigma = {P,H} + {H,P}; the pairing below keeps the cancellation exact
    // when H is proportional to the identity.
    let mut sigma = pq
        .matmul(&hp)
        .sub(&pp.matmul(&hq))
        .add(&hq.matmul(&pp).sub(&hp.matmul(&pq)));
    sigma.dealias_inplace();
    let i_h = C64::new(0.0, hbar);
    let ih_sigma = sigma.scale(i_h);

    // The density-gradient part of the derivative, (ih/2D^2)[{D,H}, P], is
    // kept in the integrated-by-parts form -(ih/2)(d_q(w B_p) - d_p(w B_q))
    // with B_mu = [H_mu, P], expanded so that no spectral derivative is ever
    // multiplied by more than one regularized factor: the bare form divides
    // the noise floor of the differentiated fields by D^2 in the tails.
    let bq = hq.commutator(p);
    let bp = hp.commutator(p);
    let bq_q = hqq.commutator(p).add(&hq.commutator(&pq));
    let bq_p = hqp.commutator(p).add(&hq.commutator(&pp));
    let bp_q = hqp.commutator(p).add(&hp.commutator(&pq));
    let bp_p = hpp.commutator(p).add(&hp.commutator(&pp));

    // T = Re Tr(P ih Sigma), the unnormalized expectation of ih Sigma, with
    // Leibniz-expanded partials for the same reason.
    let sigma_q = sigma.partial_q();
    let sigma_p = sigma.partial_p();
    let t = p.matmul(&ih_sigma).trace().re();
    let tq = pq
        .matmul(&ih_sigma)
        .add(&p.matmul(&sigma_q.scale(i_h)))
        .trace()
        .re();
    let tp = pp
        .matmul(&ih_sigma)
        .add(&p.matmul(&sigma_p.scale(i_h)))
        .trace()
        .re();

    // dh_dd = (1/2) w'(D) T, the exact D-derivative of the regularized energy.
    let dh_dd = wslope.mul(&t).scale(0.5);
    let dh_dd_q = wcurv.mul(&dq).mul(&t).add(&wslope.mul(&tq)).scale(0.5);
    let dh_dd_p = wcurv.mul(&dp).mul(&t).add(&wslope.mul(&tp)).scale(0.5);

    // Split derivative A = H + ih w Sigma - (ih/2)(w_q B_p - w_p B_q).
    let grad_term = bp.mul_scalar(&wq).sub(&bq.mul_scalar(&wp));
    let a = hmat
        .add(&sigma.mul_scalar(&w).scale(i_h))
        .sub(&grad_term.scale(i_h * 0.5));
    let dh_dp = a.add(&MatrixField::scalar_times_identity(&dh_dd, n));

    // Expanded partials of A.
    let grad_term_q = bp
        .mul_scalar(&wqq)
        .add(&bp_q.mul_scalar(&wq))
        .sub(&bq.mul_scalar(&wqp).add(&bq_q.mul_scalar(&wp)));
    let grad_term_p = bp
        .mul_scalar(&wqp)
        .add(&bp_p.mul_scalar(&wq))
        .sub(&bq.mul_scalar(&wpp).add(&bq_p.mul_scalar(&wp)));
    let aq = hq
        .add(
            &sigma
                .mul_scalar(&wq)
                .add(&sigma_q.mul_scalar(&w))
                .scale(i_h),
        )
        .sub(&grad_term_q.scale(i_h * 0.5));
    let ap = hp
        .add(
            &sigma
                .mul_scalar(&wp)
                .add(&sigma_p.mul_scalar(&w))
                .scale(i_h),
        )
        .sub(&grad_term_p.scale(i_h * 0.5));

    let exq = expect_of(p, &w, &aq);
    let exp = expect_of(p, &w, &ap);

    Ok(ClosureKit {
        hbar,
        d,
        wd,
        a,
        aq,
        ap,
        dh_dp,
        dh_dd,
        dh_dd_q,
        dh_dd_p,
        exq,
        exp,
    })
}

impl ClosureKit {
    /// Transport velocity X = X_{dh/dD} + <X_{dh/dP}> of the split form.
    pub fn velocity_split(&self) -> PhaseVectorField {
        PhaseVectorField {
            comp_q: self.dh_dd_p.add(&self.exp),
            comp_p: self.dh_dd_q.add(&self.exq).scale(-1.0),
        }
    }

    /// Transport velocity <X_{dH/dP}> of the single-variable form; it differs
    /// from the split velocity only by the regularized weight w D on the
    /// identity component.
    pub fn velocity_full(&self) -> PhaseVectorField {
        PhaseVectorField {
            comp_q: self.dh_dd_p.mul(&self.wd).add(&self.exp),
            comp_p: self.dh_dd_q.mul(&self.wd).add(&self.exq).scale(-1.0),
        }
    }
}

/// Divergence of the matrix field transported by a real velocity field,
/// div(P X), computed entrywise and dealiased.
pub(crate) fn matrix_transport_div(p: &MatrixField, x: &PhaseVectorField) -> MatrixField {
    let n = p.dim();
    let mut out = MatrixField::zeros(p.grid().clone(), n);
    for a in 0..n {
        for b in 0..n {
            let e = p.entry(a, b);
            let fq = e.mul_real(&x.comp_q).partial_q();
            let fp = e.mul_real(&x.comp_p).partial_p();
            out.set_entry(a, b, &fq.add(&fp));
        }
    }
    out.dealias_inplace();
    out
}

/// Gradient-coupling weight T = Re Tr(P ih Sigma) of the closure energy.
fn bracket_weight(h: &HybridHamiltonian, p: &MatrixField, hbar: f64) -> ScalarField {
    let hq = h.partial_q_field();
    let hp = h.partial_p_field();
    let pq = p.partial_q();
    let pp = p.partial_p();
    let mut sigma = pq
        .matmul(&hp)
        .sub(&pp.matmul(&hq))
        .add(&hq.matmul(&pp).sub(&hp.matmul(&pq)));
    sigma.dealias_inplace();
    p.matmul(&sigma.scale(C64::new(0.0, hbar))).trace().re()
}

/// Total energy H(P) of the closure model.
pub fn closure_hamiltonian(h: &HybridHamiltonian, st: &ClosureState) -> Result<f64> {
    let d = st.density();
    check_degenerate(&d, st.d_floor)?;
    let w = regularized_inverse(&d, st.d_floor);
    let t = bracket_weight(h, &st.p, st.hbar);
    let energy_density = st
        .p
        .matmul(&h.matrix_field())
        .trace()
        .re()
        .add(&w.mul(&t).scale(0.5));
    Ok(energy_density.integrate())
}

/// Derivative of the closure energy with respect to the regularization
/// scale eps, together with the grid index of max |D|.  eps = d_floor *
/// max(D) follows the state, so the exact Gateaux derivative of the energy
/// in a direction V is the dh_dp pairing plus
/// d_floor * Tr V(argmax) * (dH/deps); the flow itself never sees this
/// term (it enters dh_dd only as an additive constant), but variational
/// checks that perturb the density at the argmax need it.
pub fn closure_eps_sensitivity(
    h: &HybridHamiltonian,
    st: &ClosureState,
) -> Result<(f64, (usize, usize))> {
    let d = st.density();
    check_degenerate(&d, st.d_floor)?;
    let w_eps = regularized_inverse_eps_slope(&d, st.d_floor);
    let t = bracket_weight(h, &st.p, st.hbar);
    let slope = w_eps.mul(&t).scale(0.5).integrate();
    Ok((slope, d.argmax_abs()))
}

/// Two-variable energy h(D, P) with D treated as an independent field; used
/// by the finite-difference oracle for dh/dD.
pub fn closure_hamiltonian_two_var(
    h: &HybridHamiltonian,
    d: &ScalarField,
    p: &MatrixField,
    hbar: f64,
    d_floor: f64,
) -> Result<f64> {
    check_degenerate(d, d_floor)?;
    let w = regularized_inverse(d, d_floor);
    let t = bracket_weight(h, p, hbar);
    let energy_density = p
        .matmul(&h.matrix_field())
        .trace()
        .re()
        .add(&w.mul(&t).scale(0.5));
    Ok(energy_density.integrate())
}

/// Explicit functional derivatives of the closure Hamiltonian.
pub fn closure_var_derivative(
    h: &HybridHamiltonian,
    st: &ClosureState,
) -> Result<ClosureDerivatives> {
    let kit = build_kit(h, st)?;
    Ok(ClosureDerivatives {
        dh_dp: kit.dh_dp,
        dh_dd: kit.dh_dd,
    })
}

/// Transport velocity X = X_{dh/dD} + <X_{dh/dP}>.
pub fn closure_velocity(h: &HybridHamiltonian, st: &ClosureState) -> Result<PhaseVectorField> {
    let kit = build_kit(h, st)?;
    Ok(kit.velocity_split())
}

/// Single-variable evolution: dP/dt = -div(P <X_{dH/dP}>) - (i/hbar)[dH/dP, P].
pub fn closure_rhs(h: &HybridHamiltonian, st: &ClosureState) -> Result<MatrixField> {
    let kit = build_kit(h, st)?;
    let x = kit.velocity_full();
    let transport = matrix_transport_div(&st.p, &x);
    let comm = kit.dh_dp.commutator(&st.p);
    Ok(transport
        .scale_re(-1.0)
        .add(&comm.scale(C64::new(0.0, -1.0 / kit.hbar))))
}

/// Split evolution: the advection equation for D plus the matrix equation
/// for P.  Used as a cross-check of the single-variable form.
pub fn closure_rhs_split(
    h: &HybridHamiltonian,
    st: &ClosureState,
) -> Result<(ScalarField, MatrixField)> {
    let kit = build_kit(h, st)?;
    let p = &st.p;
    let pq = p.partial_q();
    let pp = p.partial_p();

    // dD/dt = -{D, dh/dD} - Tr{P, dh/dP}, with expanded dh/dD partials.
    let dq = kit.d.partial_q();
    let dp = kit.d.partial_p();
    let br_d = dq.mul(&kit.dh_dd_p).sub(&dp.mul(&kit.dh_dd_q));
    let tr_bracket = pq
        .matmul(&kit.ap)
        .sub(&pp.matmul(&kit.aq))
        .trace()
        .re();
    let d_dot = br_d.add(&tr_bracket).scale(-1.0);

    // dP/dt = -{P, dh/dD} - div(P <X_{dh/dP}>) - (i/hbar)[dh/dP, P].
    let br_p = pq
        .mul_scalar(&kit.dh_dd_p)
        .sub(&pp.mul_scalar(&kit.dh_dd_q));
    let x_split = PhaseVectorField {
        comp_q: kit.exp.clone(),
        comp_p: kit.exq.scale(-1.0),
    };
    let transport = matrix_transport_div(p, &x_split);
    let comm = kit.a.commutator(p);
    let p_dot = br_p
        .add(&transport)
        .scale_re(-1.0)
        .add(&comm.scale(C64::new(0.0, -1.0 / kit.hbar)));
    Ok((d_dot, p_dot))
}

/// Modified hybrid density operator D_hat = P + (ih/2) div(D^{-1} [P, J dP]).
pub fn hybrid_density_closure(st: &ClosureState) -> Result<MatrixField> {
    let d = st.density();
    check_degenerate(&d, st.d_floor)?;
    let w = regularized_inverse(&d, st.d_floor);
    let p = &st.p;
    let pq = p.partial_q();
    let pp = p.partial_p();
    // J dP = (dP/dp, -dP/dq); the commutator with P gives a matrix-valued
    // phase-space vector whose weighted divergence is the correction term.
    let vq = p.commutator(&pp).mul_scalar(&w);
    let vp = p.commutator(&pq).mul_scalar(&w).scale_re(-1.0);
    let mut div = vq.partial_q().add(&vp.partial_p());
    div.dealias_inplace();
    Ok(p.add(&div.scale(C64::new(0.0, 0.5 * st.hbar))))
}

/// Max deviation of the unitary equivariance D_hat(U P U^t) = U D_hat(P) U^t.
pub fn equivariance_unitary(st: &ClosureState, u: &Array2<C64>) -> Result<f64> {
    let n = st.n();
    if u.nrows() != n || u.ncols() != n {
        return Err(SimError::WrongQuantumDimension {
            expected: n,
            found: u.nrows(),
        });
    }
    let mut dev = 0.0f64;
    for a in 0..n {
        for b in 0..n {
            let mut s = C64::new(0.0, 0.0);
            for c in 0..n {
                s += u[(c, a)].conj() * u[(c, b)];
            }
            let target = if a == b { 1.0 } else { 0.0 };
            dev = dev.max((s - C64::new(target, 0.0)).norm());
        }
    }
    if dev > 1e-10 {
        return Err(SimError::NonUnitary(dev));
    }
    let dhat = hybrid_density_closure(st)?;
    let rotated_state = ClosureState {
        p: st.p.conjugate_by(u),
        hbar: st.hbar,
        d_floor: st.d_floor,
    };
    let lhs = hybrid_density_closure(&rotated_state)?;
    let rhs = dhat.conjugate_by(u);
    Ok(lhs.sub(&rhs).max_abs())
}

fn require_square_symmetric(grid: &PhaseSpaceGrid) -> Result<()> {
    let (qmin, qmax, pmin, pmax) = grid.extents();
    if grid.nq() != grid.np() || (qmin + qmax).abs() > 1e-12 || (pmin + pmax).abs() > 1e-12
        || (qmin - pmin).abs() > 1e-12
    {
        return Err(SimError::InvalidGrid(
            "quarter-turn check needs a square grid with symmetric extents".into(),
        ));
    }
    Ok(())
}

/// Pullback of a matrix field by the quarter-turn symplectomorphism
/// (q, p) -> (p, -q), realized as an exact grid index permutation.
pub fn quarter_turn_matrix(m: &MatrixField) -> Result<MatrixField> {
    require_square_symmetric(m.grid())?;
    let n = m.dim();
    let nn = m.grid().nq();
    let mut out = MatrixField::zeros(m.grid().clone(), n);
    for i in 0..nn {
        for j in 0..nn {
            let (si, sj) = (j, (nn - i) % nn);
            for a in 0..n {
                for b in 0..n {
                    out.values[(i, j, a, b)] = m.values[(si, sj, a, b)];
                }
            }
        }
    }
    Ok(out)
}

/// Max deviation of the push-forward equivariance of the hybrid density under
/// the quarter-turn grid rotation.
pub fn equivariance_rotation(st: &ClosureState) -> Result<f64> {
    let dhat = hybrid_density_closure(st)?;
    let rotated_state = ClosureState {
        p: quarter_turn_matrix(&st.p)?,
        hbar: st.hbar,
        d_floor: st.d_floor,
    };
    let lhs = hybrid_density_closure(&rotated_state)?;
    let rhs = quarter_turn_matrix(&dhat)?;
    Ok(lhs.sub(&rhs).max_abs())
}

/// Ehrenfest transport velocity <X_H>.
pub fn ehrenfest_velocity(h: &HybridHamiltonian, st: &ClosureState) -> Result<PhaseVectorField> {
    let d = st.density();
    check_degenerate(&d, st.d_floor)?;
    let w = regularized_inverse(&d, st.d_floor);
    let hq = h.partial_q_field();
    let hp = h.partial_p_field();
    Ok(PhaseVectorField {
        comp_q: expect_of(&st.p, &w, &hp),
        comp_p: expect_of(&st.p, &w, &hq).scale(-1.0),
    })
}

/// Ehrenfest model: dP/dt = -div(P <X_H>) - (i/hbar)[H, P].
pub fn ehrenfest_rhs(h: &HybridHamiltonian, st: &ClosureState) -> Result<MatrixField> {
    let x = ehrenfest_velocity(h, st)?;
    let transport = matrix_transport_div(&st.p, &x);
    let comm = h.matrix_field().commutator(&st.p);
    Ok(transport
        .scale_re(-1.0)
        .add(&comm.scale(C64::new(0.0, -1.0 / st.hbar))))
}

/// Mean-field model for the pair (D, rho_q):
/// dD/dt = -{D, <H>_rho} and ih drho_q/dt = [int D H, rho_q].
pub fn meanfield_rhs(
    h: &HybridHamiltonian,
    d: &ScalarField,
    rho_q: &Array2<C64>,
    hbar: f64,
) -> Result<(ScalarField, Array2<C64>)> {
    let n = h.n();
    if rho_q.nrows() != n || rho_q.ncols() != n {
        return Err(SimError::WrongQuantumDimension {
            expected: n,
            found: rho_q.nrows(),
        });
    }
    // Effective classical Hamiltonian <H>(z) = Re Tr(rho_q H(z)); building it
    // term by term keeps the analytic derivative path of polynomial terms.
    let mut heff = ScalarField::zeros(d.grid().clone());
    for (f, m) in h.terms() {
        let mut c = C64::new(0.0, 0.0);
        for a in 0..n {
            for b in 0..n {
                c += rho_q[(a, b)] * m[(b, a)];
            }
        }
        heff = heff.add(&f.scale(c.re));
    }
    let d_dot = crate::field::poisson_bracket(d, &heff)?.scale(-1.0)
        // {D, h} with the convention {f,g} = df/dq dg/dp - df/dp dg/dq:
        // dD/dt = -{D, heff}.
        ;
    // Integrated Hamiltonian matrix for the quantum factor.
    let mut hint = Array2::from_elem((n, n), C64::new(0.0, 0.0));
    for (f, m) in h.terms() {
        let weight = d.mul(f).integrate();
        for a in 0..n {
            for b in 0..n {
                hint[(a, b)] += m[(a, b)] * weight;
            }
        }
    }
    let mut rho_dot = Array2::from_elem((n, n), C64::new(0.0, 0.0));
    let minus_i = C64::new(0.0, -1.0 / hbar);
    for a in 0..n {
        for b in 0..n {
            let mut s = C64::new(0.0, 0.0);
            for c in 0..n {
                s += hint[(a, c)] * rho_q[(c, b)] - rho_q[(a, c)] * hint[(c, b)];
            }
            rho_dot[(a, b)] = minus_i * s;
        }
    }
    Ok((d_dot, rho_dot))
}

/// Generators for the Casimir family C(P) = int (Tr P) Tr Phi(P / Tr P).
#[derive(Debug, Clone, PartialEq)]
pub enum PhiSpec {
    /// Phi(x) = x^k with k <= 4.
    Power(u32),
    /// Phi(x) = -x log x with 0 log 0 = 0.
    Entropy,
}

/// Casimir functional of the closure bracket.
pub fn casimir(st: &ClosureState, phi: &PhiSpec) -> Result<f64> {
    let d = st.density();
    check_degenerate(&d, st.d_floor)?;
    let w = regularized_inverse(&d, st.d_floor);
    let rho = st.p.mul_scalar(&w);
    let n = st.n();
    let density = match phi {
        PhiSpec::Power(k) => {
            if *k > 4 {
                return Err(SimError::UnsupportedPhi(format!("power {k} exceeds 4")));
            }
            if *k == 0 {
                d.scale(n as f64)
            } else {
                let mut acc = rho.clone();
                for _ in 1..*k {
                    acc = acc.matmul(&rho);
                }
                d.mul(&acc.trace().re())
            }
        }
        PhiSpec::Entropy => {
            let (nq, np) = st.grid().shape();
            let mut vals = Array2::zeros((nq, np));
            for i in 0..nq {
                for j in 0..np {
                    let mut s = 0.0;
                    for lam in rho.eigenvalues_at(i, j) {
                        if lam > 0.0 {
                            s -= lam * lam.ln();
                        }
                    }
                    vals[(i, j)] = s;
                }
            }
            d.mul(&ScalarField::from_values(st.grid().clone(), vals)?)
        }
    };
    Ok(density.integrate())
}

/// Functionals with closed-form derivatives, used to probe the reduced
/// Poisson bracket.
#[derive(Clone)]
pub enum FunctionalSpec {
    /// f(P) = int <P, A> Lambda.
    Linear(MatrixField),
    /// f(P) = int <P, A> <P, B> Lambda / int Tr P Lambda.
    Quadratic(MatrixField, MatrixField),
}

impl FunctionalSpec {
    fn check(&self, st: &ClosureState) -> Result<()> {
        let check_one = |m: &MatrixField| -> Result<()> {
            st.p.check_compatible(m)?;
            let dev = m.hermitian_deviation();
            if dev > 1e-10 * m.max_abs().max(1.0) {
                return Err(SimError::NonHermitian(dev));
            }
            Ok(())
        };
        match self {
            FunctionalSpec::Linear(a) => check_one(a),
            FunctionalSpec::Quadratic(a, b) => {
                check_one(a)?;
                check_one(b)
            }
        }
    }

    pub fn value(&self, st: &ClosureState) -> Result<f64> {
        self.check(st)?;
        match self {
            FunctionalSpec::Linear(a) => Ok(st.p.matmul(a).trace().re().integrate()),
            FunctionalSpec::Quadratic(a, b) => {
                let fa = st.p.matmul(a).trace().re();
                let fb = st.p.matmul(b).trace().re();
                let num = fa.mul(&fb).integrate();
                let den = st.total_mass();
                if den.abs() < 1e-300 {
                    return Err(SimError::DegenerateDensity(
                        "total mass vanishes in quadratic functional".into(),
                    ));
                }
                Ok(num / den)
            }
        }
    }

    pub fn derivative(&self, st: &ClosureState) -> Result<MatrixField> {
        self.check(st)?;
        match self {
            FunctionalSpec::Linear(a) => Ok(a.clone()),
            FunctionalSpec::Quadratic(a, b) => {
                let fa = st.p.matmul(a).trace().re();
                let fb = st.p.matmul(b).trace().re();
                let num = fa.mul(&fb).integrate();
                let den = st.total_mass();
                if den.abs() < 1e-300 {
                    return Err(SimError::DegenerateDensity(
                        "total mass vanishes in quadratic functional".into(),
                    ));
                }
                let n = st.n();
                let lead = a.mul_scalar(&fb).add(&b.mul_scalar(&fa)).scale_re(1.0 / den);
                let id_part = ScalarField::constant(st.grid().clone(), num / (den * den));
                Ok(lead.sub(&MatrixField::scalar_times_identity(&id_part, n)))
            }
        }
    }
}

fn bracket_from_derivatives(
    df: &MatrixField,
    dg: &MatrixField,
    dgq: &MatrixField,
    dgp: &MatrixField,
    st: &ClosureState,
) -> Result<f64> {
    let d = st.density();
    check_degenerate(&d, st.d_floor)?;
    let w = regularized_inverse(&d, st.d_floor);
    let p = &st.p;
    // -(i/hbar) pairing term.
    let comm = df.commutator(dg);
    let term1 = p
        .matmul(&comm.scale(C64::new(0.0, 1.0 / st.hbar)))
        .trace()
        .re()
        .integrate()
        * -1.0;
    // Regularized sandwich term.
    let fq = p.matmul(&df.partial_q()).trace().re();
    let fp = p.matmul(&df.partial_p()).trace().re();
    let gq = p.matmul(dgq).trace().re();
    let gp = p.matmul(dgp).trace().re();
    let term2 = w
        .mul(&fq.mul(&gp).sub(&fp.mul(&gq)))
        .integrate();
    Ok(term1 + term2)
}

/// Reduced Poisson bracket {{f, g}}_1 evaluated on the functional family.
pub fn bracket_eval(
    f: &FunctionalSpec,
    g: &FunctionalSpec,
    st: &ClosureState,
) -> Result<f64> {
    let df = f.derivative(st)?;
    let dg = g.derivative(st)?;
    let dgq = dg.partial_q();
    let dgp = dg.partial_p();
    bracket_from_derivatives(&df, &dg, &dgq, &dgp, st)
}

/// Reduced bracket of a family functional with the closure Hamiltonian,
/// {{f, H}}_1, using the analytic expansion of the Hamiltonian derivative.
pub fn bracket_with_hamiltonian(
    f: &FunctionalSpec,
    h: &HybridHamiltonian,
    st: &ClosureState,
) -> Result<f64> {
    let df = f.derivative(st)?;
    let kit = build_kit(h, st)?;
    // Partials of dH/dP = A + dh_dd Id, expanded.
    let n = st.n();
    let dgq = kit
        .aq
        .add(&MatrixField::scalar_times_identity(&kit.dh_dd_q, n));
    let dgp = kit
        .ap
        .add(&MatrixField::scalar_times_identity(&kit.dh_dd_p, n));
    bracket_from_derivatives(&df, &kit.dh_dp, &dgq, &dgp, st)
}

/// Residuals of the marginal evolution laws, relative to the scale of each
/// marginal rate: dD/dt = Tr{H, D_hat} and ih drho_q/dt = int [H, D_hat].
pub struct MarginalResiduals {
    pub classical: f64,
    pub quantum: f64,
}

pub fn marginal_residuals(h: &HybridHamiltonian, st: &ClosureState) -> Result<MarginalResiduals> {
    let rhs = closure_rhs(h, st)?;
    let dhat = hybrid_density_closure(st)?;
    let hq = h.partial_q_field();
    let hp = h.partial_p_field();

    // Classical law: Tr of the evolution against Tr{H, D_hat}.
    let lhs_d = rhs.trace_re();
    let mut bracket = hq.matmul(&dhat.partial_p()).sub(&hp.matmul(&dhat.partial_q()));
    bracket.dealias_inplace();
    let rhs_d = bracket.trace_re();
    let scale_d = lhs_d.max_abs().max(rhs_d.max_abs()).max(1e-300);
    let classical = lhs_d.sub(&rhs_d).max_abs() / scale_d;

    // Quantum law: integral of the evolution against (1/ih) int [H, D_hat].
    let lhs_q = rhs.integrate();
    let hmat = h.matrix_field();
    let comm = hmat.matmul(&dhat).sub(&dhat.matmul(&hmat));
    let rhs_q = comm.integrate().mapv(|z| z * C64::new(0.0, -1.0 / st.hbar));
    let n = st.n();
    let mut diff = 0.0f64;
    let mut scale_q = 1e-300f64;
    for a in 0..n {
        for b in 0..n {
            diff = diff.max((lhs_q[(a, b)] - rhs_q[(a, b)]).norm());
            scale_q = scale_q.max(lhs_q[(a, b)].norm()).max(rhs_q[(a, b)].norm());
        }
    }
    Ok(MarginalResiduals {
        classical,
        quantum: diff / scale_q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{hamiltonian_vector_field, Poly};
    use crate::kvh::liouville_rhs;
    use crate::matrix_field::pauli;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const HBAR: f64 = 1.0;
    const FLOOR: f64 = 1e-12;

    fn grid64() -> Arc<PhaseSpaceGrid> {
        PhaseSpaceGrid::square(64, 8.0).unwrap()
    }

    fn harmonic(grid: &Arc<PhaseSpaceGrid>) -> ScalarField {
        ScalarField::from_poly(
            grid.clone(),
            Poly::from_terms([((2, 0), 0.5), ((0, 2), 0.5)]),
        )
    }

    /// Wide Gaussian bump, spectrally clean on the 64^2 test grid.
    fn gaussian(grid: &Arc<PhaseSpaceGrid>, q0: f64, p0: f64) -> ScalarField {
        ScalarField::from_fn(grid.clone(), |q, p| {
            (-((q - q0).powi(2) + (p - p0).powi(2)) / 4.0).exp()
        })
    }

    /// Smooth strictly positive density for dual-path and oracle tests.
    fn bounded_density(grid: &Arc<PhaseSpaceGrid>, seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = ScalarField::band_limited(grid.clone(), 2, &mut rng);
        let amp = 0.2 / b.max_abs().max(1e-12);
        ScalarField::constant(grid.clone(), 1.0).add(&b.scale(amp))
    }

    /// Hermitian random state with D bounded away from zero.
    fn random_state(grid: &Arc<PhaseSpaceGrid>, seed: u64) -> ClosureState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = bounded_density(grid, seed ^ 0x5a5a);
        let mut p = MatrixField::scalar_times_identity(&d.scale(0.5), 2);
        for k in 1..=3 {
            let b = ScalarField::band_limited(grid.clone(), 2, &mut rng);
            let amp = 0.08 / b.max_abs().max(1e-12);
            let comp = MatrixField::scalar_times_matrix(&b.scale(amp), &pauli(k));
            p = p.add(&comp);
        }
        ClosureState::new(p, HBAR, FLOOR).unwrap()
    }

    /// Random state under a decaying envelope, for tests whose two evaluation
    /// paths only agree up to boundary terms on non-decaying fields.
    fn enveloped_state(grid: &Arc<PhaseSpaceGrid>, seed: u64) -> ClosureState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = ScalarField::from_fn(grid.clone(), |q, p| (-(q * q + p * p) / 2.0).exp());
        let d = env.mul(&bounded_density(grid, seed ^ 0x5a5a));
        let mut p = MatrixField::scalar_times_identity(&d.scale(0.5), 2);
        for k in 1..=3 {
            let b = ScalarField::band_limited(grid.clone(), 2, &mut rng);
            let amp = 0.08 / b.max_abs().max(1e-12);
            let comp =
                MatrixField::scalar_times_matrix(&env.mul(&b.scale(amp)), &pauli(k));
            p = p.add(&comp);
        }
        ClosureState::new(p, HBAR, FLOOR).unwrap()
    }

    fn random_hermitian_perturbation(grid: &Arc<PhaseSpaceGrid>, seed: u64) -> MatrixField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dp = MatrixField::zeros(grid.clone(), 2);
        for k in 0..=3 {
            let b = ScalarField::band_limited(grid.clone(), 2, &mut rng);
            let amp = 1.0 / b.max_abs().max(1e-12);
            dp = dp.add(&MatrixField::scalar_times_matrix(&b.scale(amp), &pauli(k)));
        }
        dp
    }

    /// Spin-boson style Hamiltonian with polynomial scalar parts.
    fn spin_boson(grid: &Arc<PhaseSpaceGrid>, lambda: f64, omega_s: f64) -> HybridHamiltonian {
        let h0 = harmonic(grid);
        let hx = ScalarField::from_poly(grid.clone(), Poly::monomial(1, 0, lambda * HBAR / 2.0));
        let hz = ScalarField::constant(grid.clone(), omega_s * HBAR / 2.0);
        HybridHamiltonian::from_terms(vec![
            (h0, Array2::eye(2).mapv(|x: f64| C64::new(x, 0.0))),
            (hx, pauli(1)),
            (hz, pauli(3)),
        ])
        .unwrap()
    }

    fn rho0() -> Array2<C64> {
        // Fixed normalized pure projector, off-axis.
        let c = (0.3f64).cos();
        let s = (0.3f64).sin();
        let psi = [C64::new(c, 0.0), C64::new(s * 0.6, s * 0.8)];
        let mut m = Array2::from_elem((2, 2), C64::new(0.0, 0.0));
        for a in 0..2 {
            for b in 0..2 {
                m[(a, b)] = psi[a] * psi[b].conj();
            }
        }
        m
    }

    #[test]
    fn classical_energy_is_classical() {
        let grid = grid64();
        let d = gaussian(&grid, 1.0, 0.0);
        let h = HybridHamiltonian::classical(harmonic(&grid), 2);
        let p = MatrixField::scalar_times_matrix(&d, &rho0());
        let st = ClosureState::new(p, HBAR, FLOOR).unwrap();
        let e = closure_hamiltonian(&h, &st).unwrap();
        let expected = d.mul(&harmonic(&grid)).integrate();
        assert_abs_diff_eq!(e, expected, epsilon = 1e-13 * expected.abs());
    }

    #[test]
    fn meanfield_energy_drops_correlation_term() {
        let grid = grid64();
        let d = gaussian(&grid, 0.5, -0.5);
        let h = spin_boson(&grid, 0.5, 1.0);
        let p = MatrixField::scalar_times_matrix(&d, &rho0());
        let st = ClosureState::new(p, HBAR, FLOOR).unwrap();
        let e = closure_hamiltonian(&h, &st).unwrap();
        // Mean-field value: int D <H>_rho0.
        let mut expected = 0.0;
        for (f, m) in h.terms() {
            let mut c = C64::new(0.0, 0.0);
            let r = rho0();
            for a in 0..2 {
                for b in 0..2 {
                    c += r[(a, b)] * m[(b, a)];
                }
            }
            expected += d.mul(f).integrate() * c.re;
        }
        assert_abs_diff_eq!(e, expected, epsilon = 1e-10 * expected.abs().max(1.0));
    }

    #[test]
    fn energy_matches_factorized_form() {
        // Independent evaluation through the (D, sigma, psi) variables with
        // the closure constraint sigma = D (A - A_B) substituted.
        use crate::field::canonical_one_form;
        use crate::hybrid::{berry_connection, hybrid_liouvillian_apply, HybridWavefunction};
        let grid = grid64();
        let psi: Vec<ComplexField> = vec![
            ComplexField::from_fn(grid.clone(), |q, p| {
                let t = 0.4 * (-(q * q + p * p) / 4.0).exp();
                C64::new((t / 2.0).cos(), 0.0)
            }),
            ComplexField::from_fn(grid.clone(), |q, p| {
                let t = 0.4 * (-(q * q + p * p) / 4.0).exp();
                let f = 0.3 * (-(q * q + p * p) / 4.0).exp();
                C64::new(0.0, f).exp() * (t / 2.0).sin()
            }),
        ];
        let d = gaussian(&grid, 0.8, -0.3);
        let st = ClosureState::pure(&d, &psi, HBAR, FLOOR).unwrap();
        let h = spin_boson(&grid, 0.5, 1.0);
        let e = closure_hamiltonian(&h, &st).unwrap();

        // h(D, sigma, psi) = int (sigma . <psi, X_H psi> + D <psi, L_H psi>).
        let ups = HybridWavefunction::new(psi.clone(), HBAR);
        let lpsi = hybrid_liouvillian_apply(&h, &ups).unwrap();
        let mut expect_l = ScalarField::zeros(grid.clone());
        for a in 0..2 {
            expect_l = expect_l.add(&psi[a].conj().mul(&lpsi.comps[a]).re());
        }
        let hq = h.partial_q_field();
        let hp = h.partial_p_field();
        let mut xq = ScalarField::zeros(grid.clone());
        let mut xp = ScalarField::zeros(grid.clone());
        for a in 0..2 {
            for b in 0..2 {
                xq = xq.add(&psi[a].conj().mul(&hp.entry(a, b).mul(&psi[b])).re());
                xp = xp.sub(&psi[a].conj().mul(&hq.entry(a, b).mul(&psi[b])).re());
            }
        }
        let a_can = canonical_one_form(&grid);
        let a_berry = berry_connection(&psi, HBAR).unwrap();
        let sigma_q = d.mul(&a_can.comp_q.sub(&a_berry.comp_q));
        let sigma_p = d.mul(&a_can.comp_p.sub(&a_berry.comp_p));
        // sigma . <X_H> pairs the covector with the vector field (xq, xp).
        let pair_val = sigma_q.mul(&xq).add(&sigma_p.mul(&xp));
        let e_ref = pair_val.add(&d.mul(&expect_l)).integrate();
        let scale = e.abs().max(e_ref.abs());
        assert!(
            (e - e_ref).abs() < 1e-8 * scale,
            "closure energy {e} vs factorized form {e_ref}"
        );
    }

    #[test]
    fn classical_derivatives_are_trivial() {
        let grid = grid64();
        let d = gaussian(&grid, 1.0, 0.5);
        let h = HybridHamiltonian::classical(harmonic(&grid), 2);
        let p = MatrixField::scalar_times_matrix(&d, &rho0());
        let st = ClosureState::new(p, HBAR, FLOOR).unwrap();
        let der = closure_var_derivative(&h, &st).unwrap();
        assert_eq!(der.dh_dp.sub(&h.matrix_field()).max_abs(), 0.0);
        assert_eq!(der.dh_dd.max_abs(), 0.0);
    }

    #[test]
    fn constant_hamiltonian_derivatives_are_trivial() {
        let grid = grid64();
        let st = random_state(&grid, 7);
        let m = pauli(3).mapv(|z| z * 0.7) + pauli(1).mapv(|z| z * 0.2);
        let h = HybridHamiltonian::constant(grid.clone(), m).unwrap();
        let der = closure_var_derivative(&h, &st).unwrap();
        assert_eq!(der.dh_dp.sub(&h.matrix_field()).max_abs(), 0.0);
        assert_eq!(der.dh_dd.max_abs(), 0.0);
        let x = closure_velocity(&h, &st).unwrap();
        assert_eq!(x.max_norm(), 0.0);
    }

    #[test]
    fn gateaux_oracle_matrix_derivative() {
        let grid = grid64();
        let h = spin_boson(&grid, 0.5, 1.0);
        for seed in 0..3u64 {
            let st = random_state(&grid, 100 + seed);
            let der = closure_var_derivative(&h, &st).unwrap();
            let dp = random_hermitian_perturbation(&grid, 200 + seed);
            let eps = 1e-5;
            let plus = ClosureState {
                p: st.p.add(&dp.scale_re(eps)),
                ..st.clone()
            };
            let minus = ClosureState {
                p: st.p.sub(&dp.scale_re(eps)),
                ..st.clone()
            };
            let fd = (closure_hamiltonian(&h, &plus).unwrap()
                - closure_hamiltonian(&h, &minus).unwrap())
                / (2.0 * eps);
            let pairing = der.dh_dp.matmul(&dp).trace().re().integrate();
            let scale = fd.abs().max(pairing.abs()).max(1e-12);
            assert!(
                (fd - pairing).abs() / scale < 1e-6,
                "seed {seed}: finite difference {fd} vs pairing {pairing}"
            );
        }
    }

    #[test]
    fn gateaux_oracle_density_derivative() {
        let grid = grid64();
        let h = spin_boson(&grid, 0.5, 1.0);
        let st = random_state(&grid, 11);
        let der = closure_var_derivative(&h, &st).unwrap();
        let d = st.density();
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        let b = ScalarField::band_limited(grid.clone(), 2, &mut rng);
        let delta = b.scale(1.0 / b.max_abs());
        // Richardson-extrapolated central difference; the raw quotient loses
        // accuracy to cancellation against the D-independent energy term.
        let quot = |eps: f64| {
            (closure_hamiltonian_two_var(&h, &d.add(&delta.scale(eps)), &st.p, HBAR, FLOOR)
                .unwrap()
                - closure_hamiltonian_two_var(&h, &d.sub(&delta.scale(eps)), &st.p, HBAR, FLOOR)
                    .unwrap())
                / (2.0 * eps)
        };
        let fd = (4.0 * quot(5e-4) - quot(1e-3)) / 3.0;
        let pairing = der.dh_dd.mul(&delta).integrate();
        let scale = fd.abs().max(pairing.abs()).max(1e-12);
        assert!(
            (fd - pairing).abs() / scale < 2e-6,
            "finite difference {fd} vs pairing {pairing}"
        );
    }

    #[test]
    fn classical_velocity_is_hamiltonian_flow() {
        let grid = grid64();
        let d = bounded_density(&grid, 3);
        let h0 = harmonic(&grid);
        let h = HybridHamiltonian::classical(h0.clone(), 2);
        let p = MatrixField::scalar_times_matrix(&d, &rho0());
        let st = ClosureState::new(p, HBAR, FLOOR).unwrap();
        let x = closure_velocity(&h, &st).unwrap();
        let xh = hamiltonian_vector_field(&h0);
        let dev = x
            .comp_q
            .sub(&xh.comp_q)
            .max_abs()
            .max(x.comp_p.sub(&xh.comp_p).max_abs());
        assert!(dev < 1e-12, "velocity deviation {dev}");
    }

    #[test]
    fn classical_rhs_reduces_to_liouville() {
        let grid = grid64();
        let d = gaussian(&grid, 1.5, 0.0);
        let h0 = harmonic(&grid);
        let h = HybridHamiltonian::classical(h0.clone(), 2);
        let p = MatrixField::scalar_times_matrix(&d, &rho0());
        let st = ClosureState::new(p, HBAR, FLOOR).unwrap();
        let rhs = closure_rhs(&h, &st).unwrap();
        let trace = rhs.trace_re();
        let liou = liouville_rhs(&h0, &d).unwrap();
        let dev = trace.sub(&liou).max_abs() / liou.max_abs();
        assert!(dev < 1e-9, "trace of closure RHS vs Liouville: {dev}");
        // The quantum direction is frozen: RHS stays proportional to rho0.
        let r = rho0();
        let mut dir_dev = 0.0f64;
        let (nq, np) = grid.shape();
        for i in (0..nq).step_by(7) {
            for j in (0..np).step_by(7) {
                let s = trace.values[(i, j)];
                for a in 0..2 {
                    for b in 0..2 {
                        dir_dev = dir_dev
                            .max((rhs.values[(i, j, a, b)] - r[(a, b)] * s).norm());
                    }
                }
            }
        }
        assert!(
            dir_dev < 1e-12 * trace.max_abs(),
            "conditional state drifts in the classical case: {dir_dev}"
        );
    }

    #[test]
    fn constant_hamiltonian_gives_quantum_precession() {
        let grid = grid64();
        let st = random_state(&grid, 21);
        let m = pauli(3).mapv(|z| z * (0.5 * HBAR));
        let h = HybridHamiltonian::constant(grid.clone(), m.clone()).unwrap();
        let rhs = closure_rhs(&h, &st).unwrap();
        // ih d rho_q/dt = [H, rho_q] after quadrature.
        let lhs = rhs.integrate().mapv(|z| z * C64::new(0.0, HBAR));
        let rho_q = st.quantum_density();
        let mut expected = Array2::from_elem((2, 2), C64::new(0.0, 0.0));
        for a in 0..2 {
            for b in 0..2 {
                let mut s = C64::new(0.0, 0.0);
                for c in 0..2 {
                    s += m[(a, c)] * rho_q[(c, b)] - rho_q[(a, c)] * m[(c, b)];
                }
                expected[(a, b)] = s;
            }
        }
        let mut dev = 0.0f64;
        for a in 0..2 {
            for b in 0..2 {
                dev = dev.max((lhs[(a, b)] - expected[(a, b)]).norm());
            }
        }
        assert!(dev < 1e-12, "quantum reduction deviation {dev}");
    }

    #[test]
    fn split_form_agrees_with_single_variable_form() {
        let grid = grid64();
        let h = spin_boson(&grid, 0.5, 1.0);
        let st = enveloped_state(&grid, 31);
        let rhs = closure_rhs(&h, &st).unwrap();
        let (d_dot, p_dot) = closure_rhs_split(&h, &st).unwrap();
        let scale = rhs.max_abs();
        let dev_p = rhs.sub(&p_dot).max_abs() / scale;
        assert!(dev_p < 1e-8, "matrix equations disagree: {dev_p}");
        let dev_d = rhs.trace_re().sub(&d_dot).max_abs() / d_dot.max_abs();
        assert!(dev_d < 1e-8, "density equations disagree: {dev_d}");
    }

    #[test]
    fn trace_is_slaved_to_transport() {
        let grid = grid64();
        let h = spin_boson(&grid, 0.5, 1.0);
        let st = random_state(&grid, 41);
        let kit = build_kit(&h, &st).unwrap();
        let x = kit.velocity_full();
        let rhs = closure_rhs(&h, &st).unwrap();
        let dxq = kit.d.mul(&x.comp_q).partial_q();
        let dxp = kit.d.mul(&x.comp_p).partial_p();
        let mut div = dxq.add(&dxp);
        // Match the dealiasing applied to the matrix transport.
        grid.dealias(&mut div.values);
        let dev = rhs.trace_re().add(&div).max_abs() / div.max_abs();
        assert!(dev < 1e-8, "trace not slaved to div(D X): {dev}");
    }

    #[test]
    fn total_probability_is_stationary() {
        let grid = grid64();
        let h = spin_boson(&grid, 0.5, 1.0);
        let st = random_state(&grid, 51);
        let rhs = closure_rhs(&h, &st).unwrap();
        let total = rhs.trace_re().integrate();
        assert!(total.abs() < 1e-10, "total mass rate {total}");
    }

    #[test]
    fn hybrid_density_trivial_for_constant_conditional_state() {
        let grid = grid64();
        let d = gaussian(&grid, 0.7, 0.2);
        let p = MatrixField::scalar_times_matrix(&d, &rho0());
        let st = ClosureState::new(p.clone(), HBAR, FLOOR).unwrap();
        let dhat = hybrid_density_closure(&st).unwrap();
        let dev = dhat.sub(&p).max_abs();
        assert!(dev < 1e-13, "correction should vanish, got {dev}");
    }

    #[test]
    fn hybrid_density_preserves_trace_and_integral() {
        let grid = grid64();
        let st = random_state(&grid, 61);
        let dhat = hybrid_density_closure(&st).unwrap();
        let tr_dev = dhat.trace_re().sub(&st.density()).max_abs();
        assert!(tr_dev < 1e-10, "trace of correction {tr_dev}");
        let int_dev = {
            let a = dhat.integrate();
            let b = st.quantum_density();
            let mut m = 0.0f64;
            for x in 0..2 {
                for y in 0..2 {
                    m = m.max((a[(x, y)] - b[(x, y)]).norm());
                }
            }
            m
        };
        assert!(int_dev < 1e-12, "integral of correction {int_dev}");
    }

    #[test]
    fn energy_through_hybrid_density() {
        let grid = grid64();
        let h = spin_boson(&grid, 0.5, 1.0);
        let d = gaussian(&grid, 0.6, -0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut p = MatrixField::scalar_times_identity(&d.scale(0.5), 2);
        for k in 1..=3 {
            let b = ScalarField::band_limited(grid.clone(), 2, &mut rng);
            let amp = 0.15 / b.max_abs().max(1e-12);
            p = p.add(&MatrixField::scalar_times_matrix(
                &b.scale(amp).mul(&d),
                &pauli(k),
            ));
        }
        let st = ClosureState::new(p, HBAR, FLOOR).unwrap();
        let e = closure_hamiltonian(&h, &st).unwrap();
        let dhat = hybrid_density_closure(&st).unwrap();
        let e_ref = h.matrix_field().matmul(&dhat).trace().re().integrate();
        let scale = e.abs().max(e_ref.abs());
        assert!(
            (e - e_ref).abs() < 1e-8 * scale,
            "energy {e} vs Tr int H D_hat {e_ref}"
        );
    }

    #[test]
    fn unitary_equivariance() {
        let grid = grid64();
        let st = random_state(&grid, 81);
        assert_eq!(
            equivariance_unitary(&st, &Array2::eye(2).mapv(|x: f64| C64::new(x, 0.0))).unwrap(),
            0.0
        );
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        for _ in 0..3 {
            // Random unitary from a unit quaternion.
            let mut v = [0.0f64; 4];
            for x in v.iter_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in v.iter_mut() {
                *x /= norm;
            }
            let u = ndarray::array![
                [C64::new(v[0], v[1]), C64::new(v[2], v[3])],
                [C64::new(-v[2], v[3]), C64::new(v[0], -v[1])]
            ];
            let dev = equivariance_unitary(&st, &u).unwrap();
            assert!(dev < 1e-12, "unitary equivariance deviation {dev}");
        }
    }

    #[test]
    fn rotation_equivariance() {
        let grid = grid64();
        let st = random_state(&grid, 91);
        let dev = equivariance_rotation(&st).unwrap();
        let scale = st.p.max_abs();
        assert!(dev < 1e-10 * scale, "rotation equivariance deviation {dev}");
    }

    #[test]
    fn nonunitary_is_rejected() {
        let grid = grid64();
        let st = random_state(&grid, 95);
        let u = Array2::eye(2).mapv(|x: f64| C64::new(2.0 * x, 0.0));
        assert!(matches!(
            equivariance_unitary(&st, &u),
            Err(SimError::NonUnitary(_))
        ));
    }

    #[test]
    fn casimir_values() {
        let grid = grid64();
        let d = gaussian(&grid, 0.4, 0.6);
        let mass = d.integrate();
        let p = MatrixField::scalar_times_matrix(&d, &rho0());
        let st = ClosureState::new(p, HBAR, FLOOR).unwrap();
        // Phi(x) = x: total mass.
        let c1 = casimir(&st, &PhiSpec::Power(1)).unwrap();
        assert_abs_diff_eq!(c1, mass, epsilon = 1e-12 * mass);
        // Pure state: rank-one projector makes every power collapse to the mass.
        let c2 = casimir(&st, &PhiSpec::Power(2)).unwrap();
        assert_abs_diff_eq!(c2, mass, epsilon = 1e-9 * mass);
        // Entropy of a pure state vanishes.
        let ce = casimir(&st, &PhiSpec::Entropy).unwrap();
        assert!(ce.abs() < 1e-8 * mass, "pure-state entropy {ce}");
        assert!(matches!(
            casimir(&st, &PhiSpec::Power(5)),
            Err(SimError::UnsupportedPhi(_))
        ));
    }

    #[test]
    fn bracket_antisymmetry_and_casimir() {
        let grid = grid64();
        let st = random_state(&grid, 101);
        let a = random_hermitian_perturbation(&grid, 102);
        let b = random_hermitian_perturbation(&grid, 103);
        let f = FunctionalSpec::Linear(a.clone());
        let g = FunctionalSpec::Quadratic(a, b);
        // f = g vanishes exactly.
        assert_eq!(bracket_eval(&f, &f, &st).unwrap(), 0.0);
        // Antisymmetry for distinct members.
        let fg = bracket_eval(&f, &g, &st).unwrap();
        let gf = bracket_eval(&g, &f, &st).unwrap();
        assert!(
            (fg + gf).abs() < 1e-12 * fg.abs().max(1.0),
            "antisymmetry violated: {fg} vs {gf}"
        );
        // The total trace is a Casimir: A = Id gives zero against everything.
        let id = constant_matrix_field(grid.clone(), &Array2::eye(2).mapv(|x: f64| C64::new(x, 0.0)));
        let trace_fn = FunctionalSpec::Linear(id);
        assert_eq!(bracket_eval(&trace_fn, &g, &st).unwrap(), 0.0);
    }

    #[test]
    fn bracket_generates_the_dynamics() {
        let grid = grid64();
        let h = spin_boson(&grid, 0.5, 1.0);
        let st = random_state(&grid, 111);
        let a = random_hermitian_perturbation(&grid, 112);
        let f = FunctionalSpec::Linear(a.clone());
        // d/dt f(P) along the flow, evaluated as the pairing with the RHS.
        let rhs = closure_rhs(&h, &st).unwrap();
        let df_dt = a.matmul(&rhs).trace().re().integrate();
        let br = bracket_with_hamiltonian(&f, &h, &st).unwrap();
        let scale = df_dt.abs().max(br.abs()).max(1e-12);
        assert!(
            (df_dt - br).abs() / scale < 1e-8,
            "pairing {df_dt} vs bracket {br}"
        );
    }

    #[test]
    fn meanfield_reduces_to_classical() {
        let grid = grid64();
        let h0 = harmonic(&grid);
        let h = HybridHamiltonian::classical(h0.clone(), 2);
        let d = gaussian(&grid, 1.0, -1.0);
        let (d_dot, rho_dot) = meanfield_rhs(&h, &d, &rho0(), HBAR).unwrap();
        let liou = liouville_rhs(&h0, &d).unwrap();
        let dev = d_dot.sub(&liou).max_abs() / liou.max_abs();
        assert!(dev < 1e-12, "mean-field classical reduction {dev}");
        let mut m = 0.0f64;
        for a in 0..2 {
            for b in 0..2 {
                m = m.max(rho_dot[(a, b)].norm());
            }
        }
        assert!(m < 1e-12, "quantum factor should be static, rate {m}");
    }

    #[test]
    fn ehrenfest_constant_hamiltonian_precesses() {
        let grid = grid64();
        let d = gaussian(&grid, 0.0, 1.0);
        let p = MatrixField::scalar_times_matrix(&d, &rho0());
        let st = ClosureState::new(p, HBAR, FLOOR).unwrap();
        let m = pauli(3).mapv(|z| z * (0.5 * HBAR));
        let h = HybridHamiltonian::constant(grid.clone(), m).unwrap();
        let rhs = ehrenfest_rhs(&h, &st).unwrap();
        // D static: trace of the commutator vanishes, and <X_H> = 0.
        let dev = rhs.trace_re().max_abs();
        assert!(dev < 1e-13, "Ehrenfest density should be static: {dev}");
        // rho precesses: off-diagonal rate nonzero.
        assert!(rhs.max_abs() > 1e-3);
    }

    #[test]
    fn marginal_laws_hold() {
        let grid = grid64();
        let h = spin_boson(&grid, 0.5, 1.0);
        let d = gaussian(&grid, 1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(121);
        let b = ScalarField::band_limited(grid.clone(), 2, &mut rng);
        let angle = b.scale(0.3 / b.max_abs());
        let psi = vec![
            ComplexField::from_fn(grid.clone(), |q, p| {
                let t = 0.3 * (-((q * q + p * p) / 4.0)).exp();
                C64::new(t.cos(), 0.0)
            }),
            ComplexField::from_fn(grid.clone(), |q, p| {
                let t = 0.3 * (-((q * q + p * p) / 4.0)).exp();
                C64::new(0.0, t.sin())
            }),
        ];
        let _ = angle;
        let st = ClosureState::pure(&d, &psi, HBAR, FLOOR).unwrap();
        let res = marginal_residuals(&h, &st).unwrap();
        assert!(
            res.classical < 1e-6,
            "classical marginal residual {}",
            res.classical
        );
        assert!(
            res.quantum < 1e-6,
            "quantum marginal residual {}",
            res.quantum
        );
    }

    #[test]
    fn degenerate_density_is_reported() {
        let grid = grid64();
        let d = gaussian(&grid, 0.0, 0.0);
        let p = MatrixField::scalar_times_matrix(&d, &rho0());
        // A floor of 0.9 puts most of the mass below the regularization scale.
        let st = ClosureState::new(p, HBAR, 0.9).unwrap();
        let h = HybridHamiltonian::classical(harmonic(&grid), 2);
        assert!(matches!(
            closure_hamiltonian(&h, &st),
            Err(SimError::DegenerateDensity(_))
        ));
    }
}
