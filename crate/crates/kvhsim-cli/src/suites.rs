//! Seeded random-state generators and the invariant check suites behind
//! `kvhsim check`.

use std::sync::Arc;

use kvhsim::closure::{
    bracket_eval, closure_hamiltonian, closure_rhs, closure_rhs_split, closure_var_derivative,
    equivariance_rotation, equivariance_unitary, ClosureState, FunctionalSpec,
};
use kvhsim::matrix_field::{pauli, MatrixField};
use kvhsim::spin::{
    density_from_spin, spin_boson_hamiltonian, spin_from_density, spin_hamiltonian, spin_rhs,
    spin_var_derivatives, SpinState,
};
use kvhsim::{ComplexField, PhaseSpaceGrid, Result, ScalarField};
use ndarray::Array2;
use num_complex::Complex64 as C64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smooth positive mass-normalized density from a band-limited sample.
/// The Gaussian envelope keeps the state supported away from the domain
/// boundary, where products with the polynomial hamiltonian coefficients
/// would otherwise pick up wrap-around jumps.
pub fn random_density(grid: &Arc<PhaseSpaceGrid>, rng: &mut impl Rng) -> ScalarField {
    let bl = ScalarField::band_limited(grid.clone(), 2, rng);
    let scale = bl.max_abs().max(1.0);
    let env = ScalarField::from_fn(grid.clone(), |q, p| (-(q * q + p * p) / 2.88).exp());
    let d = bl.map(|v| (0.8 * v / scale).exp()).mul(&env);
    let mass = d.integrate();
    d.scale(1.0 / mass)
}

/// Mixed two-level state P = (D/2)(Id + r n.sigma) with smooth fields and
/// Bloch radius bounded away from 1.
pub fn random_closure_state(
    grid: &Arc<PhaseSpaceGrid>,
    hbar: f64,
    d_floor: f64,
    rng: &mut impl Rng,
) -> ClosureState {
    let d = random_density(grid, rng);
    let theta = ScalarField::band_limited(grid.clone(), 2, rng);
    let phi = ScalarField::band_limited(grid.clone(), 2, rng);
    let rad = ScalarField::band_limited(grid.clone(), 2, rng);
    let r = rad.map(|v| 0.45 + 0.4 * v.tanh());
    let n1 = theta.map(f64::sin).mul(&phi.map(f64::cos));
    let n2 = theta.map(f64::sin).mul(&phi.map(f64::sin));
    let n3 = theta.map(f64::cos);
    let mut p = MatrixField::scalar_times_matrix(&d.scale(0.5), &pauli(0));
    for (k, n) in [n1, n2, n3].into_iter().enumerate() {
        let coeff = d.mul(&r).mul(&n).scale(0.5);
        p = p.add(&MatrixField::scalar_times_matrix(&coeff, &pauli(k + 1)));
    }
    ClosureState::new(p, hbar, d_floor).expect("construction is hermitian")
}

pub fn random_spin_state(
    grid: &Arc<PhaseSpaceGrid>,
    hbar: f64,
    d_floor: f64,
    rng: &mut impl Rng,
) -> SpinState {
    spin_from_density(&random_closure_state(grid, hbar, d_floor, rng))
        .expect("random closure state converts")
}

/// Smooth hermitian matrix field, for functional directions and test
/// observables.
pub fn random_hermitian_direction(
    grid: &Arc<PhaseSpaceGrid>,
    rng: &mut impl Rng,
) -> MatrixField {
    // Same envelope as random_density: perturbations stay supported where
    // the states are, so directional derivatives probe the linear regime.
    let env = ScalarField::from_fn(grid.clone(), |q, p| (-(q * q + p * p) / 2.88).exp());
    let mut m = MatrixField::zeros(grid.clone(), 2);
    for a in 0..2 {
        for b in a..2 {
            let f = ComplexField::band_limited(grid.clone(), 2, rng);
            let f = f.scale(C64::new(1.0 / f.max_abs().max(1.0), 0.0));
            let f = f.mul_real(&env);
            if a == b {
                m.set_entry(a, b, &ComplexField::from_real(&f.re()));
            } else {
                m.set_entry(a, b, &f);
                m.set_entry(b, a, &f.conj());
            }
        }
    }
    m
}

/// Haar-ish random SU(2) element from a normalized quaternion.
pub fn random_unitary(rng: &mut impl Rng) -> Array2<C64> {
    let raw: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
    let [a, b, c, d] = raw.map(|v| v / norm);
    let z = C64::new(a, b);
    let w = C64::new(c, d);
    Array2::from_shape_vec((2, 2), vec![z, w, -w.conj(), z.conj()]).unwrap()
}

pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, worst: Result<f64>, tol: f64) -> CheckOutcome {
    match worst {
        Ok(v) => CheckOutcome {
            name,
            passed: v < tol,
            detail: format!("max deviation {v:.3e} (tolerance {tol:.1e})"),
        },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("errored: {e}"),
        },
    }
}

/// Central-difference Gateaux check of the matrix-form energy derivative.
fn gateaux_matrix(grid: &Arc<PhaseSpaceGrid>, rng: &mut impl Rng, trials: usize) -> Result<f64> {
    let h = spin_boson_hamiltonian(grid.clone(), 0.4, 1.1).to_hybrid(1.0)?;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let st = random_closure_state(grid, 1.0, 1e-8, rng);
        let v = random_hermitian_direction(grid, rng);
        let eps = 1e-5;
        let shifted = |s: f64| {
            ClosureState::new(st.p.add(&v.scale_re(s)), st.hbar, st.d_floor)
                .expect("perturbed state stays hermitian")
        };
        let fd = (closure_hamiltonian(&h, &shifted(eps))?
            - closure_hamiltonian(&h, &shifted(-eps))?)
            / (2.0 * eps);
        let deriv = closure_var_derivative(&h, &st)?;
        let analytic = deriv.dh_dp.matmul(&v).trace().re().integrate();
        let scale = fd.abs().max(analytic.abs()).max(1e-12);
        worst = worst.max((fd - analytic).abs() / scale);
    }
    Ok(worst)
}

/// Same check on the Bloch-variable energy.
fn gateaux_spin(grid: &Arc<PhaseSpaceGrid>, rng: &mut impl Rng, trials: usize) -> Result<f64> {
    let sh = spin_boson_hamiltonian(grid.clone(), 0.4, 1.1);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let st = random_spin_state(grid, 1.0, 1e-8, rng);
        let vd = ScalarField::band_limited(grid.clone(), 2, rng).scale(0.1);
        let vs: [ScalarField; 3] =
            std::array::from_fn(|_| ScalarField::band_limited(grid.clone(), 2, rng).scale(0.05));
        let eps = 1e-5;
        let shifted = |s: f64| SpinState {
            d: st.d.add(&vd.scale(s)),
            s: std::array::from_fn(|k| st.s[k].add(&vs[k].scale(s))),
            hbar: st.hbar,
            d_floor: st.d_floor,
        };
        let fd =
            (spin_hamiltonian(&sh, &shifted(eps))? - spin_hamiltonian(&sh, &shifted(-eps))?)
                / (2.0 * eps);
        let (dh_dd, dh_ds) = spin_var_derivatives(&sh, &st)?;
        let mut analytic = dh_dd.mul(&vd).integrate();
        for k in 0..3 {
            analytic += dh_ds[k].mul(&vs[k]).integrate();
        }
        let scale = fd.abs().max(analytic.abs()).max(1e-12);
        worst = worst.max((fd - analytic).abs() / scale);
    }
    Ok(worst)
}

fn rhs_hermiticity(grid: &Arc<PhaseSpaceGrid>, rng: &mut impl Rng, trials: usize) -> Result<f64> {
    let h = spin_boson_hamiltonian(grid.clone(), 0.4, 1.1).to_hybrid(1.0)?;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let st = random_closure_state(grid, 1.0, 1e-8, rng);
        let r = closure_rhs(&h, &st)?;
        worst = worst.max(r.hermitian_deviation() / r.max_abs().max(1.0));
    }
    Ok(worst)
}

fn bracket_antisymmetry(
    grid: &Arc<PhaseSpaceGrid>,
    rng: &mut impl Rng,
    trials: usize,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let st = random_closure_state(grid, 1.0, 1e-8, rng);
        let f = FunctionalSpec::Linear(random_hermitian_direction(grid, rng));
        let g = FunctionalSpec::Quadratic(
            random_hermitian_direction(grid, rng),
            random_hermitian_direction(grid, rng),
        );
        let fg = bracket_eval(&f, &g, &st)?;
        let gf = bracket_eval(&g, &f, &st)?;
        let scale = fg.abs().max(gf.abs()).max(1.0);
        worst = worst.max((fg + gf).abs() / scale);
        let ff = bracket_eval(&f, &f, &st)?;
        worst = worst.max(ff.abs() / scale);
    }
    Ok(worst)
}

fn unitary_equivariance(
    grid: &Arc<PhaseSpaceGrid>,
    rng: &mut impl Rng,
    trials: usize,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let st = random_closure_state(grid, 1.0, 1e-8, rng);
        let u = random_unitary(rng);
        worst = worst.max(equivariance_unitary(&st, &u)?);
    }
    Ok(worst)
}

fn rotation_equivariance(
    grid: &Arc<PhaseSpaceGrid>,
    rng: &mut impl Rng,
    trials: usize,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let st = random_closure_state(grid, 1.0, 1e-8, rng);
        worst = worst.max(equivariance_rotation(&st)?);
    }
    Ok(worst)
}

/// Bloch-form rhs against the Pauli decomposition of the split matrix-form
/// rhs (the two forms are the same discretization expressed in different
/// variables, so they must agree to rounding).
pub fn dual_path_probe(grid: &Arc<PhaseSpaceGrid>, rng: &mut impl Rng, trials: usize) -> Result<f64> {
    let sh = spin_boson_hamiltonian(grid.clone(), 0.4, 1.1);
    let hh = sh.to_hybrid(1.0)?;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let spin = random_spin_state(grid, 1.0, 1e-8, rng);
        let matrix = density_from_spin(&spin)?;
        let (dd, ds) = spin_rhs(&sh, &spin)?;
        let (dd_m, pdot) = closure_rhs_split(&hh, &matrix)?;
        let scale = dd_m.max_abs().max(pdot.max_abs()).max(1e-12);
        worst = worst.max(dd.sub(&dd_m).max_abs() / scale);
        for k in 0..3 {
            let sk_m = pdot
                .matmul(&kvhsim::matrix_field::constant_matrix_field(
                    grid.clone(),
                    &pauli(k + 1),
                ))
                .trace_re()
                .scale(spin.hbar / 2.0);
            worst = worst.max(ds[k].sub(&sk_m).max_abs() / scale);
        }
    }
    Ok(worst)
}

/// The full invariant suite behind `kvhsim check`.
pub fn run_check_suites(seed: u64) -> Vec<CheckOutcome> {
    let grid = PhaseSpaceGrid::square(32, 8.0).expect("static grid parameters");
    // The dual-path identity is checked at rounding level, which needs the
    // enveloped states fully resolved; the finer grid buys that headroom.
    let grid64 = PhaseSpaceGrid::square(64, 8.0).expect("static grid parameters");
    let mut rng = rng_for(seed);
    vec![
        outcome(
            "rhs-hermiticity",
            rhs_hermiticity(&grid, &mut rng, 5),
            1e-10,
        ),
        outcome(
            "bracket-antisymmetry",
            bracket_antisymmetry(&grid, &mut rng, 5),
            1e-8,
        ),
        outcome("gateaux-matrix", gateaux_matrix(&grid, &mut rng, 5), 1e-5),
        outcome("gateaux-spin", gateaux_spin(&grid, &mut rng, 5), 1e-5),
        outcome(
            "equivariance-unitary",
            unitary_equivariance(&grid, &mut rng, 10),
            1e-12,
        ),
        outcome(
            "equivariance-rotation",
            rotation_equivariance(&grid, &mut rng, 3),
            1e-10,
        ),
        outcome("dual-path-rhs", dual_path_probe(&grid64, &mut rng, 5), 1e-8),
    ]
}
