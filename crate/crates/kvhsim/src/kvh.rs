//! Classical dynamics in Koopman-wavefunction form: the prequantum operator,
//! its evolution equation, the projection to the Liouville density and the
//! polar (amplitude/phase) split.

use ndarray::Array2;
use num_complex::Complex64 as C64;

use crate::error::Result;
use crate::field::{
    canonical_one_form, divergence, hamiltonian_vector_field, pair, poisson_bracket,
    poisson_bracket_cc, poisson_bracket_sc, symplectic_raise, ComplexField, CovectorField,
    ScalarField,
};

/// Classical state: complex wavefunction on phase space.
#[derive(Clone)]
pub struct KoopmanWavefunction {
    pub psi: ComplexField,
    pub hbar: f64,
}

impl KoopmanWavefunction {
    pub fn new(psi: ComplexField, hbar: f64) -> Self {
        assert!(hbar > 0.0, "hbar must be positive");
        Self { psi, hbar }
    }

    pub fn norm_sq(&self) -> f64 {
        self.psi.norm_sq()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm_sq().sqrt();
        Self {
            psi: self.psi.scale(C64::new(1.0 / n, 0.0)),
            hbar: self.hbar,
        }
    }
}

/// Polar decomposition of a Koopman wavefunction.
///
/// `s` is meaningful only where `mask` is set; outside it the phase is
/// numerically undefined and reported as zero.
pub struct MadelungData {
    pub s: ScalarField,
    pub r: ScalarField,
    pub d: ScalarField,
    pub sigma: CovectorField,
    pub mask: Array2<bool>,
}

/// Scalar potential of the prequantum operator: H - A . X_H, the negative
/// phase-space Lagrangian.
pub fn prequantum_potential(h: &ScalarField) -> ScalarField {
    let a = canonical_one_form(h.grid());
    h.sub(&pair(&a, &hamiltonian_vector_field(h)))
}

/// Apply the prequantum operator: i hbar {H, psi} + (H - A . X_H) psi.
pub fn prequantum_apply(h: &ScalarField, state: &KoopmanWavefunction) -> Result<ComplexField> {
    let bracket = poisson_bracket_sc(h, &state.psi)?;
    let potential = prequantum_potential(h);
    Ok(bracket
        .scale(C64::new(0.0, state.hbar))
        .add(&state.psi.mul_real(&potential)))
}

/// Time derivative of the wavefunction: (-i/hbar) times the prequantum
/// operator.
pub fn kvh_rhs(h: &ScalarField, state: &KoopmanWavefunction) -> Result<ComplexField> {
    Ok(prequantum_apply(h, state)?.scale(C64::new(0.0, -1.0 / state.hbar)))
}

/// Project a wavefunction to its Liouville density:
/// rho = |psi|^2 - div(J A |psi|^2) + i hbar {psi, conj psi}.
///
/// The one-form term is expanded by the product rule so the polynomial
/// components of A are differentiated exactly.
pub fn momentum_map_j(state: &KoopmanWavefunction) -> Result<ScalarField> {
    let d = state.psi.abs_sq();
    let ja = symplectic_raise(&canonical_one_form(state.psi.grid()));
    let div_ja = divergence(&ja)?;
    let transport = d
        .mul(&div_ja)
        .add(&ja.comp_q.mul(&d.partial_q()))
        .add(&ja.comp_p.mul(&d.partial_p()));
    let circulation = poisson_bracket_cc(&state.psi, &state.psi.conj())?
        .scale(C64::new(0.0, state.hbar))
        .re();
    Ok(d.sub(&transport).add(&circulation))
}

/// Classical Liouville equation right-hand side: d rho / dt = {H, rho}.
pub fn liouville_rhs(h: &ScalarField, rho: &ScalarField) -> Result<ScalarField> {
    poisson_bracket(h, rho)
}

fn unwrap_step(prev: f64, raw: f64) -> f64 {
    let mut delta = raw - prev;
    while delta > std::f64::consts::PI {
        delta -= std::f64::consts::TAU;
    }
    while delta < -std::f64::consts::PI {
        delta += std::f64::consts::TAU;
    }
    prev + delta
}

/// Polar split psi = R exp(i S / hbar) with line-by-line phase unwrapping.
pub fn madelung_split(state: &KoopmanWavefunction, floor: f64) -> MadelungData {
    let grid = state.psi.grid().clone();
    let (nq, np) = grid.shape();
    let d = state.psi.abs_sq();
    let r = d.map(f64::sqrt);
    let mask = Array2::from_shape_fn((nq, np), |idx| r.values[idx] > floor);

    let raw = state.psi.values.mapv(|z| z.arg());
    let mut theta = Array2::<f64>::zeros((nq, np));
    // Unwrap the first p-line along q, then each q-line along p.
    theta[(0, 0)] = raw[(0, 0)];
    for i in 1..nq {
        theta[(i, 0)] = unwrap_step(theta[(i - 1, 0)], raw[(i, 0)]);
    }
    for i in 0..nq {
        for j in 1..np {
            theta[(i, j)] = unwrap_step(theta[(i, j - 1)], raw[(i, j)]);
        }
    }
    let mut s_values = theta.mapv(|t| t * state.hbar);
    s_values.zip_mut_with(&mask, |s, &m| {
        if !m {
            *s = 0.0;
        }
    });
    let s = ScalarField::from_values(grid.clone(), s_values).expect("shape from grid");

    let conj = state.psi.conj();
    let sigma_q = conj
        .mul(&state.psi.partial_q())
        .im()
        .scale(state.hbar);
    let sigma_p = conj
        .mul(&state.psi.partial_p())
        .im()
        .scale(state.hbar);
    MadelungData {
        s,
        r,
        d,
        sigma: CovectorField {
            comp_q: sigma_q,
            comp_p: sigma_p,
        },
        mask,
    }
}
