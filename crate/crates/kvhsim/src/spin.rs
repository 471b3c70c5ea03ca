//! Two-level specialization of the closure model in Bloch-vector variables.
//!
//! A 2x2 matrix density decomposes as P = D/2 + s_tilde . sigma / hbar with
//! the spin vector density s_tilde = D s, |s| <= hbar/2.  The evolution is an
//! advection equation for D coupled to a Landau-Lifshitz equation for
//! s_tilde, driven by the same regularized energy as the matrix form.
//!
//! The same discretization rule as the matrix form applies: quotients by D
//! are expanded with the chain rule before discretization, so the spectral
//! transform only ever touches D, s_tilde and their derivatives, and the
//! regularized reciprocal w and its slopes enter as pointwise multipliers.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64 as C64;

use crate::closure::{
    check_degenerate, regularized_inverse, regularized_inverse_curvature,
    regularized_inverse_slope, ClosureState, PhiSpec,
};
use crate::error::{Result, SimError};
use crate::field::{ensure_same_grid, PhaseVectorField, ScalarField};
use crate::grid::PhaseSpaceGrid;
use crate::hybrid::HybridHamiltonian;
use crate::matrix_field::{pauli, MatrixField};

type Vec3 = [ScalarField; 3];

/// Bloch-vector state (D, s_tilde).
#[derive(Clone)]
pub struct SpinState {
    pub d: ScalarField,
    pub s: Vec3,
    pub hbar: f64,
    pub d_floor: f64,
}

impl SpinState {
    pub fn new(d: ScalarField, s: Vec3, hbar: f64, d_floor: f64) -> Result<Self> {
        for c in &s {
            ensure_same_grid(d.grid(), c.grid())?;
        }
        let scale = d.max_abs().max(1.0);
        if d.min() < -1e-12 * scale {
            return Err(SimError::DegenerateDensity(format!(
                "classical density reaches {:.3e}",
                d.min()
            )));
        }
        // |s_tilde| <= (hbar/2) D pointwise; equality is a pure conditional
        // state, smaller norms are mixed.
        let bound = norm3(&s)
            .sub(&d.scale(hbar / 2.0))
            .values
            .iter()
            .fold(0.0f64, |m, v| m.max(*v));
        if bound > 1e-8 * scale * hbar {
            return Err(SimError::DegenerateDensity(format!(
                "spin density exceeds the hbar D / 2 bound by {bound:.3e}"
            )));
        }
        Ok(Self { d, s, hbar, d_floor })
    }

    pub fn grid(&self) -> &Arc<PhaseSpaceGrid> {
        self.d.grid()
    }

    pub fn total_mass(&self) -> f64 {
        self.d.integrate()
    }
}

/// Hybrid Hamiltonian H0 + (hbar/2) Hvec . sigma in component form.
#[derive(Clone)]
pub struct SpinHamiltonian {
    pub h0: ScalarField,
    pub hvec: Vec3,
}

impl SpinHamiltonian {
    pub fn new(h0: ScalarField, hvec: Vec3) -> Result<Self> {
        for c in &hvec {
            ensure_same_grid(h0.grid(), c.grid())?;
        }
        Ok(Self { h0, hvec })
    }

    pub fn grid(&self) -> &Arc<PhaseSpaceGrid> {
        self.h0.grid()
    }

    /// The equivalent matrix-form Hamiltonian.
    pub fn to_hybrid(&self, hbar: f64) -> Result<HybridHamiltonian> {
        let eye = Array2::eye(2).mapv(|x: f64| C64::new(x, 0.0));
        let mut terms = vec![(self.h0.clone(), eye)];
        for k in 0..3 {
            terms.push((self.hvec[k].scale(hbar / 2.0), pauli(k + 1)));
        }
        HybridHamiltonian::from_terms(terms)
    }
}

/// Spin-boson preset: harmonic oscillator plus (lambda q, 0, omega_s) field.
pub fn spin_boson_hamiltonian(
    grid: Arc<PhaseSpaceGrid>,
    lambda: f64,
    omega_s: f64,
) -> SpinHamiltonian {
    use crate::field::Poly;
    let h0 = ScalarField::from_poly(
        grid.clone(),
        Poly::from_terms([((2, 0), 0.5), ((0, 2), 0.5)]),
    );
    let hx = ScalarField::from_poly(grid.clone(), Poly::monomial(1, 0, lambda));
    let hy = ScalarField::zeros(grid.clone());
    let hz = ScalarField::constant(grid, omega_s);
    SpinHamiltonian {
        h0,
        hvec: [hx, hy, hz],
    }
}

/// Bloch decomposition of a 2x2 matrix density: s_tilde_k = (hbar/2) Tr(P sigma_k).
pub fn spin_from_density(st: &ClosureState) -> Result<SpinState> {
    if st.n() != 2 {
        return Err(SimError::WrongQuantumDimension {
            expected: 2,
            found: st.n(),
        });
    }
    let d = st.density();
    let mut s: Vec<ScalarField> = Vec::with_capacity(3);
    for k in 1..=3 {
        let sigma = MatrixField::scalar_times_matrix(
            &ScalarField::constant(st.grid().clone(), 1.0),
            &pauli(k),
        );
        s.push(st.p.matmul(&sigma).trace().re().scale(st.hbar / 2.0));
    }
    let s: Vec3 = [s.remove(0), s.remove(0), s.remove(0)];
    SpinState::new(d, s, st.hbar, st.d_floor)
}

/// Inverse of the Bloch decomposition: P = D/2 + s_tilde . sigma / hbar.
pub fn density_from_spin(st: &SpinState) -> Result<ClosureState> {
    let mut p = MatrixField::scalar_times_identity(&st.d.scale(0.5), 2);
    for k in 0..3 {
        p = p.add(&MatrixField::scalar_times_matrix(
            &st.s[k].scale(1.0 / st.hbar),
            &pauli(k + 1),
        ));
    }
    ClosureState::new(p, st.hbar, st.d_floor)
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1].mul(&b[2]).sub(&a[2].mul(&b[1])),
        a[2].mul(&b[0]).sub(&a[0].mul(&b[2])),
        a[0].mul(&b[1]).sub(&a[1].mul(&b[0])),
    ]
}

fn add3(a: Vec3, b: &Vec3) -> Vec3 {
    let [a0, a1, a2] = a;
    [a0.add(&b[0]), a1.add(&b[1]), a2.add(&b[2])]
}

fn dot(a: &Vec3, b: &Vec3) -> ScalarField {
    a[0].mul(&b[0]).add(&a[1].mul(&b[1])).add(&a[2].mul(&b[2]))
}

fn norm3(a: &Vec3) -> ScalarField {
    dot(a, a).map(f64::sqrt)
}

fn map3(f: impl Fn(&ScalarField) -> ScalarField, a: &Vec3) -> Vec3 {
    [f(&a[0]), f(&a[1]), f(&a[2])]
}

/// Shared intermediates for one spin right-hand-side evaluation.
struct SpinKit {
    w: ScalarField,
    /// Energy density of the gradient coupling, phi = X_H . (s x grad s).
    phi: ScalarField,
    dh_dd: ScalarField,
    dh_dd_q: ScalarField,
    dh_dd_p: ScalarField,
    /// g = dh / d s_tilde and its expanded partials.
    g: Vec3,
    gq: Vec3,
    gp: Vec3,
    dq: ScalarField,
    dp: ScalarField,
    sq: Vec3,
    sp: Vec3,
}

fn build_spin_kit(sh: &SpinHamiltonian, st: &SpinState) -> Result<SpinKit> {
    ensure_same_grid(sh.grid(), st.grid())?;
    check_degenerate(&st.d, st.d_floor)?;
    let d = &st.d;
    let s = &st.s;

    let dq = d.partial_q();
    let dp = d.partial_p();
    let dqq = dq.partial_q();
    let dqp = dq.partial_p();
    let dpp = dp.partial_p();

    let sq = map3(|c| c.partial_q(), s);
    let sp = map3(|c| c.partial_p(), s);
    let sqq = map3(|c| c.partial_q(), &sq);
    let sqp = map3(|c| c.partial_p(), &sq);
    let spp = map3(|c| c.partial_p(), &sp);

    let w = regularized_inverse(d, st.d_floor);
    let wslope = regularized_inverse_slope(d, st.d_floor);
    let wcurv = regularized_inverse_curvature(d, st.d_floor);
    let wq = wslope.mul(&dq);
    let wp = wslope.mul(&dp);

    // Pairing fields Y_k = -X_{H_k} = (-dH_k/dp, dH_k/dq), analytic partials;
    // this orientation makes int w phi match the matrix-form gradient energy.
    let xq = map3(|c| c.partial_p().scale(-1.0), &sh.hvec);
    let xp = map3(|c| c.partial_q(), &sh.hvec);
    let xq_q = map3(|c| c.partial_q(), &xq);
    let xq_p = map3(|c| c.partial_p(), &xq);
    let xp_q = map3(|c| c.partial_q(), &xp);
    let xp_p = map3(|c| c.partial_p(), &xp);

    // phi = X_H . (s x grad s).
    let crossq = cross(s, &sq);
    let crossp = cross(s, &sp);
    let phi = dot(&xq, &crossq).add(&dot(&xp, &crossp));
    let crossq_q = cross(s, &sqq);
    let crossq_p = add3(cross(&sp, &sq), &cross(s, &sqp));
    let crossp_q = add3(cross(&sq, &sp), &cross(s, &sqp));
    let crossp_p = cross(s, &spp);
    let phi_q = dot(&xq_q, &crossq)
        .add(&dot(&xq, &crossq_q))
        .add(&dot(&xp_q, &crossp))
        .add(&dot(&xp, &crossp_q));
    let phi_p = dot(&xq_p, &crossq)
        .add(&dot(&xq, &crossq_p))
        .add(&dot(&xp_p, &crossp))
        .add(&dot(&xp, &crossp_p));

    // dh/dD = H0 + w'(D) phi, the exact derivative of the regularized energy.
    let dh_dd = sh.h0.add(&wslope.mul(&phi));
    let dh_dd_q = sh
        .h0
        .partial_q()
        .add(&wcurv.mul(&dq).mul(&phi))
        .add(&wslope.mul(&phi_q));
    let dh_dd_p = sh
        .h0
        .partial_p()
        .add(&wcurv.mul(&dp).mul(&phi))
        .add(&wslope.mul(&phi_p));

    // (ds x X)_i = sum_mu eps_ijk d_mu s_j X^mu_k.
    let dsxx = add3(cross(&sq, &xq), &cross(&sp, &xp));
    let dsxx_q = add3(
        add3(cross(&sqq, &xq), &cross(&sq, &xq_q)),
        &add3(cross(&sqp, &xp), &cross(&sp, &xp_q)),
    );
    let dsxx_p = add3(
        add3(cross(&sqp, &xq), &cross(&sq, &xq_p)),
        &add3(cross(&spp, &xp), &cross(&sp, &xp_p)),
    );

    // {D, H_k} = dD . X_k and its expanded partials.
    let mut brdh: Vec<ScalarField> = Vec::with_capacity(3);
    let mut brdh_q: Vec<ScalarField> = Vec::with_capacity(3);
    let mut brdh_p: Vec<ScalarField> = Vec::with_capacity(3);
    for k in 0..3 {
        brdh.push(dq.mul(&xq[k]).add(&dp.mul(&xp[k])));
        brdh_q.push(
            dqq.mul(&xq[k])
                .add(&dq.mul(&xq_q[k]))
                .add(&dqp.mul(&xp[k]))
                .add(&dp.mul(&xp_q[k])),
        );
        brdh_p.push(
            dqp.mul(&xq[k])
                .add(&dq.mul(&xq_p[k]))
                .add(&dpp.mul(&xp[k]))
                .add(&dp.mul(&xp_p[k])),
        );
    }
    let brdh: Vec3 = [brdh.remove(0), brdh.remove(0), brdh.remove(0)];
    let brdh_q: Vec3 = [brdh_q.remove(0), brdh_q.remove(0), brdh_q.remove(0)];
    let brdh_p: Vec3 = [brdh_p.remove(0), brdh_p.remove(0), brdh_p.remove(0)];
    let sxbr = cross(s, &brdh);
    let sxbr_q = add3(cross(&sq, &brdh), &cross(s, &brdh_q));
    let sxbr_p = add3(cross(&sp, &brdh), &cross(s, &brdh_p));

    // g = dh / d s_tilde = H + 2 w (ds x X) + w' (s x {D, H}).
    let mut g: Vec<ScalarField> = Vec::with_capacity(3);
    let mut gq: Vec<ScalarField> = Vec::with_capacity(3);
    let mut gp: Vec<ScalarField> = Vec::with_capacity(3);
    for k in 0..3 {
        g.push(
            sh.hvec[k]
                .add(&w.mul(&dsxx[k]).scale(2.0))
                .add(&wslope.mul(&sxbr[k])),
        );
        gq.push(
            sh.hvec[k]
                .partial_q()
                .add(&wq.mul(&dsxx[k]).add(&w.mul(&dsxx_q[k])).scale(2.0))
                .add(&wcurv.mul(&dq).mul(&sxbr[k]))
                .add(&wslope.mul(&sxbr_q[k])),
        );
        gp.push(
            sh.hvec[k]
                .partial_p()
                .add(&wp.mul(&dsxx[k]).add(&w.mul(&dsxx_p[k])).scale(2.0))
                .add(&wcurv.mul(&dp).mul(&sxbr[k]))
                .add(&wslope.mul(&sxbr_p[k])),
        );
    }
    Ok(SpinKit {
        w,
        phi,
        dh_dd,
        dh_dd_q,
        dh_dd_p,
        g: [g.remove(0), g.remove(0), g.remove(0)],
        gq: [gq.remove(0), gq.remove(0), gq.remove(0)],
        gp: [gp.remove(0), gp.remove(0), gp.remove(0)],
        dq,
        dp,
        sq,
        sp,
    })
}

/// Total energy h(D, s_tilde) = int (D H0 + s_tilde . H + w phi).
pub fn spin_hamiltonian(sh: &SpinHamiltonian, st: &SpinState) -> Result<f64> {
    let kit = build_spin_kit(sh, st)?;
    let density = st
        .d
        .mul(&sh.h0)
        .add(&dot(&st.s, &sh.hvec))
        .add(&kit.w.mul(&kit.phi));
    Ok(density.integrate())
}

/// Functional derivatives (dh/dD, dh/ds_tilde) of the regularized energy.
pub fn spin_var_derivatives(sh: &SpinHamiltonian, st: &SpinState) -> Result<(ScalarField, Vec3)> {
    let kit = build_spin_kit(sh, st)?;
    Ok((kit.dh_dd, kit.g))
}

/// Transport velocity X = X_{dh/dD} + w X_{dh/ds_k} . s_tilde_k.
pub fn spin_velocity(sh: &SpinHamiltonian, st: &SpinState) -> Result<PhaseVectorField> {
    let kit = build_spin_kit(sh, st)?;
    let comp_q = kit.dh_dd_p.add(&kit.w.mul(&dot(&st.s, &kit.gp)));
    let comp_p = kit
        .dh_dd_q
        .add(&kit.w.mul(&dot(&st.s, &kit.gq)))
        .scale(-1.0);
    Ok(PhaseVectorField { comp_q, comp_p })
}

/// Landau-Lifshitz evolution:
///   dD/dt   = -{D, dh/dD} - {s_k, dh/ds_k}
///   ds_i/dt = -{s_i, dh/dD} - {w s_i s_k, dh/ds_k} + (dh/ds x s)_i
/// with all products expanded before discretization.
pub fn spin_rhs(sh: &SpinHamiltonian, st: &SpinState) -> Result<(ScalarField, Vec3)> {
    let kit = build_spin_kit(sh, st)?;
    let grid = st.grid().clone();
    let s = &st.s;
    let wslope = regularized_inverse_slope(&st.d, st.d_floor);

    let mut d_dot = kit
        .dq
        .mul(&kit.dh_dd_p)
        .sub(&kit.dp.mul(&kit.dh_dd_q))
        .scale(-1.0);
    for k in 0..3 {
        d_dot = d_dot.sub(&kit.sq[k].mul(&kit.gp[k]).sub(&kit.sp[k].mul(&kit.gq[k])));
    }
    grid.dealias(&mut d_dot.values);

    let precession = cross(&kit.g, s);
    let mut s_dot: Vec<ScalarField> = Vec::with_capacity(3);
    for i in 0..3 {
        let mut acc = kit.sq[i]
            .mul(&kit.dh_dd_p)
            .sub(&kit.sp[i].mul(&kit.dh_dd_q))
            .scale(-1.0)
            .add(&precession[i]);
        for k in 0..3 {
            // d_mu(w s_i s_k) by the product rule.
            let aq = wslope
                .mul(&kit.dq)
                .mul(&s[i])
                .mul(&s[k])
                .add(&kit.w.mul(&kit.sq[i].mul(&s[k]).add(&s[i].mul(&kit.sq[k]))));
            let ap = wslope
                .mul(&kit.dp)
                .mul(&s[i])
                .mul(&s[k])
                .add(&kit.w.mul(&kit.sp[i].mul(&s[k]).add(&s[i].mul(&kit.sp[k]))));
            acc = acc.sub(&aq.mul(&kit.gp[k]).sub(&ap.mul(&kit.gq[k])));
        }
        grid.dealias(&mut acc.values);
        s_dot.push(acc);
    }
    Ok((d_dot, [s_dot.remove(0), s_dot.remove(0), s_dot.remove(0)]))
}

/// Casimir C = int D Phi(|s_tilde| / D) of the spin bracket, with the
/// regularized ratio |s_tilde| w.  The entropy generator maps the ratio to
/// the von Neumann entropy of the conditional Bloch state, matching the
/// matrix-form Casimir family.
pub fn spin_casimir(st: &SpinState, phi: &PhiSpec) -> Result<f64> {
    check_degenerate(&st.d, st.d_floor)?;
    let w = regularized_inverse(&st.d, st.d_floor);
    let ratio = norm3(&st.s).mul(&w);
    let hbar = st.hbar;
    let shape = match phi {
        PhiSpec::Power(k) => {
            if *k > 4 {
                return Err(SimError::UnsupportedPhi(format!("power {k} exceeds 4")));
            }
            let k = *k as i32;
            ratio.map(move |x| x.powi(k))
        }
        PhiSpec::Entropy => ratio.map(move |x| {
            let lam_plus = ((1.0 + 2.0 * x / hbar) / 2.0).max(0.0);
            let lam_minus = ((1.0 - 2.0 * x / hbar) / 2.0).max(0.0);
            let mut s = 0.0;
            if lam_plus > 0.0 {
                s -= lam_plus * lam_plus.ln();
            }
            if lam_minus > 0.0 {
                s -= lam_minus * lam_minus.ln();
            }
            s
        }),
    };
    Ok(st.d.mul(&shape).integrate())
}

/// Linear coefficients (a, b): f = int (a D + b . s_tilde).
pub type SpinLinear = (ScalarField, Vec3);

/// Functionals with closed-form derivatives for probing the spin bracket.
#[derive(Clone)]
pub enum SpinFunctionalSpec {
    Linear(SpinLinear),
    /// Product of two linear densities, normalized by the total mass.
    Quadratic(SpinLinear, SpinLinear),
}

impl SpinFunctionalSpec {
    fn linear_density(coeff: &SpinLinear, st: &SpinState) -> ScalarField {
        st.d.mul(&coeff.0).add(&dot(&st.s, &coeff.1))
    }

    pub fn value(&self, st: &SpinState) -> Result<f64> {
        match self {
            SpinFunctionalSpec::Linear(a) => Ok(Self::linear_density(a, st).integrate()),
            SpinFunctionalSpec::Quadratic(a, b) => {
                let den = st.total_mass();
                if den.abs() < 1e-300 {
                    return Err(SimError::DegenerateDensity(
                        "total mass vanishes in quadratic functional".into(),
                    ));
                }
                let fa = Self::linear_density(a, st);
                let fb = Self::linear_density(b, st);
                Ok(fa.mul(&fb).integrate() / den)
            }
        }
    }

    pub fn derivative(&self, st: &SpinState) -> Result<(ScalarField, Vec3)> {
        match self {
            SpinFunctionalSpec::Linear((a, bvec)) => Ok((a.clone(), bvec.clone())),
            SpinFunctionalSpec::Quadratic(a, b) => {
                let den = st.total_mass();
                if den.abs() < 1e-300 {
                    return Err(SimError::DegenerateDensity(
                        "total mass vanishes in quadratic functional".into(),
                    ));
                }
                let fa = Self::linear_density(a, st);
                let fb = Self::linear_density(b, st);
                let num = fa.mul(&fb).integrate();
                let d_part = a
                    .0
                    .mul(&fb)
                    .add(&b.0.mul(&fa))
                    .scale(1.0 / den)
                    .sub(&ScalarField::constant(st.grid().clone(), num / (den * den)));
                let mut s_part: Vec<ScalarField> = Vec::with_capacity(3);
                for k in 0..3 {
                    s_part.push(
                        a.1[k]
                            .mul(&fb)
                            .add(&b.1[k].mul(&fa))
                            .scale(1.0 / den),
                    );
                }
                Ok((d_part, [s_part.remove(0), s_part.remove(0), s_part.remove(0)]))
            }
        }
    }
}

fn canonical_bracket(a: &ScalarField, bq: &ScalarField, bp: &ScalarField) -> ScalarField {
    a.partial_q().mul(bp).sub(&a.partial_p().mul(bq))
}

fn spin_bracket_from_derivatives(
    fd: &ScalarField,
    fs: &Vec3,
    gdq: &ScalarField,
    gdp: &ScalarField,
    gs: &Vec3,
    gsq: &Vec3,
    gsp: &Vec3,
    st: &SpinState,
) -> Result<f64> {
    check_degenerate(&st.d, st.d_floor)?;
    let w = regularized_inverse(&st.d, st.d_floor);
    // int D {fD, gD}.
    let mut acc = st.d.mul(&canonical_bracket(fd, gdq, gdp));
    // s . (fs x gs).
    acc = acc.add(&dot(&st.s, &cross(fs, gs)));
    let fdq = fd.partial_q();
    let fdp = fd.partial_p();
    for k in 0..3 {
        // s_k ({fs_k, gD} - {gs_k, fD}).
        let t1 = canonical_bracket(&fs[k], gdq, gdp);
        let t2 = gsq[k].mul(&fdp).sub(&gsp[k].mul(&fdq));
        acc = acc.add(&st.s[k].mul(&t1.sub(&t2)));
    }
    // w s_i s_j {fs_i, gs_j}.
    for i in 0..3 {
        for j in 0..3 {
            let b = canonical_bracket(&fs[i], &gsq[j], &gsp[j]);
            acc = acc.add(&w.mul(&st.s[i]).mul(&st.s[j]).mul(&b));
        }
    }
    Ok(acc.integrate())
}

/// Reduced Poisson bracket of two family functionals on (D, s_tilde).
pub fn spin_bracket_eval(
    f: &SpinFunctionalSpec,
    g: &SpinFunctionalSpec,
    st: &SpinState,
) -> Result<f64> {
    let (fd, fs) = f.derivative(st)?;
    let (gd, gs) = g.derivative(st)?;
    let gdq = gd.partial_q();
    let gdp = gd.partial_p();
    let gsq = map3(|c| c.partial_q(), &gs);
    let gsp = map3(|c| c.partial_p(), &gs);
    spin_bracket_from_derivatives(&fd, &fs, &gdq, &gdp, &gs, &gsq, &gsp, st)
}

/// Bracket of a family functional with the spin Hamiltonian, using the
/// expanded analytic partials of the energy derivatives.
pub fn spin_bracket_with_hamiltonian(
    f: &SpinFunctionalSpec,
    sh: &SpinHamiltonian,
    st: &SpinState,
) -> Result<f64> {
    let (fd, fs) = f.derivative(st)?;
    let kit = build_spin_kit(sh, st)?;
    spin_bracket_from_derivatives(
        &fd,
        &fs,
        &kit.dh_dd_q,
        &kit.dh_dd_p,
        &kit.g,
        &kit.gq,
        &kit.gp,
        st,
    )
}
