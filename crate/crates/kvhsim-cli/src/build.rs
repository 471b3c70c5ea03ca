//! Turn a parsed RunConfig into a concrete model and initial state.

use std::sync::Arc;

use kvhsim::closure::ClosureState;
use kvhsim::dynamics::{MeanFieldState, Model, ModelState};
use kvhsim::hybrid::HybridWavefunction;
use kvhsim::kvh::KoopmanWavefunction;
use kvhsim::matrix_field::pauli;
use kvhsim::spin::{spin_boson_hamiltonian, spin_from_density, SpinHamiltonian};
use kvhsim::{ComplexField, PhaseSpaceGrid, Poly, Result, ScalarField, SimError};
use ndarray::Array2;
use num_complex::Complex64 as C64;

use crate::config::{HamiltonianSpec, PolySpec, RunConfig};

fn poly_of(spec: &PolySpec) -> Poly {
    Poly::from_terms(spec.iter().map(|&(a, b, c)| ((a, b), c)))
}

fn spin_hamiltonian_of(cfg: &RunConfig, grid: &Arc<PhaseSpaceGrid>) -> Result<SpinHamiltonian> {
    match &cfg.hamiltonian {
        HamiltonianSpec::Preset {
            name,
            lambda,
            omega_s,
        } => match name.as_str() {
            "harmonic" => {
                let h0 = ScalarField::from_poly(
                    grid.clone(),
                    Poly::from_terms([((2, 0), 0.5), ((0, 2), 0.5)]),
                );
                let zero = || ScalarField::zeros(grid.clone());
                SpinHamiltonian::new(h0, [zero(), zero(), zero()])
            }
            "spin_boson" => Ok(spin_boson_hamiltonian(grid.clone(), *lambda, *omega_s)),
            other => Err(SimError::InvalidConfig(format!("unknown preset '{other}'"))),
        },
        HamiltonianSpec::Polynomial { h0, coupling } => {
            let h0 = ScalarField::from_poly(grid.clone(), poly_of(h0));
            let hvec = [
                ScalarField::from_poly(grid.clone(), poly_of(&coupling[0])),
                ScalarField::from_poly(grid.clone(), poly_of(&coupling[1])),
                ScalarField::from_poly(grid.clone(), poly_of(&coupling[2])),
            ];
            SpinHamiltonian::new(h0, hvec)
        }
    }
}

fn coupling_is_zero(sh: &SpinHamiltonian) -> bool {
    sh.hvec.iter().all(|c| c.max_abs() == 0.0)
}

/// Gaussian density with the configured center and widths, mass-normalized.
fn gaussian_density(cfg: &RunConfig, grid: &Arc<PhaseSpaceGrid>) -> ScalarField {
    let (q0, p0) = cfg.initial.center;
    let (wq, wp) = cfg.initial.width;
    let d = ScalarField::from_fn(grid.clone(), |q, p| {
        (-(((q - q0) / wq).powi(2) + ((p - p0) / wp).powi(2)) / 2.0).exp()
    });
    let mass = d.integrate();
    d.scale(1.0 / mass)
}

/// Pointwise-normalized two-component spinor from the configured Bloch
/// direction, either uniform or through polynomial angles theta/phi.
fn spinor(cfg: &RunConfig, grid: &Arc<PhaseSpaceGrid>) -> [ComplexField; 2] {
    if cfg.initial.theta.is_some() || cfg.initial.phi.is_some() {
        let theta = cfg.initial.theta.as_ref().map_or(Poly::zero(), poly_of);
        let phi = cfg.initial.phi.as_ref().map_or(Poly::zero(), poly_of);
        let up = ComplexField::from_fn(grid.clone(), |q, p| {
            C64::new((theta.eval(q, p) / 2.0).cos(), 0.0)
        });
        let dn = ComplexField::from_fn(grid.clone(), |q, p| {
            C64::from_polar((theta.eval(q, p) / 2.0).sin(), phi.eval(q, p))
        });
        [up, dn]
    } else {
        let [x, y, z] = cfg.initial.bloch;
        let norm = (x * x + y * y + z * z).sqrt();
        let theta = (z / norm).acos();
        let phi = y.atan2(x);
        let up = C64::new((theta / 2.0).cos(), 0.0);
        let dn = C64::from_polar((theta / 2.0).sin(), phi);
        [
            ComplexField::from_fn(grid.clone(), |_, _| up),
            ComplexField::from_fn(grid.clone(), |_, _| dn),
        ]
    }
}

/// Bloch-direction density matrix (I + n.sigma)/2 for the mean-field state.
fn bloch_matrix(cfg: &RunConfig) -> Array2<C64> {
    let [x, y, z] = cfg.initial.bloch;
    let norm = (x * x + y * y + z * z).sqrt();
    let n = [x / norm, y / norm, z / norm];
    let mut rho = pauli(0).mapv(|v| v * 0.5);
    for k in 0..3 {
        rho = rho + pauli(k + 1).mapv(|v| v * 0.5 * n[k]);
    }
    rho
}

/// Scalar wave amplitude with the optional linear phase, L2-normalized.
fn wave_amplitude(cfg: &RunConfig, grid: &Arc<PhaseSpaceGrid>) -> ComplexField {
    let d = gaussian_density(cfg, grid);
    let (sq, sp) = cfg.initial.phase;
    let hbar = cfg.hbar;
    let amp = d.map(f64::sqrt);
    let psi = ComplexField::from_fn(grid.clone(), |q, p| {
        C64::from_polar(1.0, (sq * q + sp * p) / hbar)
    })
    .mul_real(&amp);
    let norm = psi.norm_sq().sqrt();
    psi.scale(C64::new(1.0 / norm, 0.0))
}

pub fn build(cfg: &RunConfig) -> Result<(Model, ModelState)> {
    let grid = PhaseSpaceGrid::new(
        cfg.nq,
        cfg.np,
        -cfg.q_half,
        cfg.q_half,
        -cfg.p_half,
        cfg.p_half,
    )?;
    let sh = spin_hamiltonian_of(cfg, &grid)?;

    if cfg.initial.theta.is_some() || cfg.initial.phi.is_some() {
        if matches!(cfg.model.as_str(), "kvh" | "meanfield") {
            return Err(SimError::InvalidConfig(format!(
                "model {} has no phase-space-dependent spin direction; drop theta/phi",
                cfg.model
            )));
        }
    }

    match cfg.model.as_str() {
        "kvh" => {
            if !coupling_is_zero(&sh) {
                return Err(SimError::InvalidConfig(
                    "model kvh needs a scalar hamiltonian; remove the coupling terms".into(),
                ));
            }
            let psi = wave_amplitude(cfg, &grid);
            let state = KoopmanWavefunction::new(psi, cfg.hbar);
            Ok((Model::Kvh(sh.h0.clone()), ModelState::Kvh(state)))
        }
        "wave" => {
            let amp = wave_amplitude(cfg, &grid);
            let chi = spinor(cfg, &grid);
            let comps = vec![amp.mul(&chi[0]), amp.mul(&chi[1])];
            let state = HybridWavefunction::new(comps, cfg.hbar).normalized();
            Ok((Model::Wave(sh.to_hybrid(cfg.hbar)?), ModelState::Wave(state)))
        }
        "closure" | "ehrenfest" => {
            let d = gaussian_density(cfg, &grid);
            let chi = spinor(cfg, &grid);
            let state = ClosureState::pure(&d, &chi, cfg.hbar, cfg.d_floor)?;
            let h = sh.to_hybrid(cfg.hbar)?;
            let model = if cfg.model == "closure" {
                Model::Closure(h)
            } else {
                Model::Ehrenfest(h)
            };
            Ok((model, ModelState::Closure(state)))
        }
        "meanfield" => {
            let d = gaussian_density(cfg, &grid);
            let state = MeanFieldState::new(d, bloch_matrix(cfg), cfg.hbar)?;
            Ok((
                Model::MeanField(sh.to_hybrid(cfg.hbar)?),
                ModelState::MeanField(state),
            ))
        }
        "spin" => {
            let d = gaussian_density(cfg, &grid);
            let chi = spinor(cfg, &grid);
            let closure = ClosureState::pure(&d, &chi, cfg.hbar, cfg.d_floor)?;
            let state = spin_from_density(&closure)?;
            Ok((Model::Spin(sh), ModelState::Spin(state)))
        }
        other => Err(SimError::InvalidConfig(format!("unknown model '{other}'"))),
    }
}
