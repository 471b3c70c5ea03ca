use kvhsim::closure::{closure_hamiltonian, closure_hamiltonian_two_var, closure_var_derivative, ClosureState};
use kvhsim::matrix_field::{pauli, MatrixField};
use kvhsim::spin::spin_boson_hamiltonian;
use kvhsim::{PhaseSpaceGrid, ScalarField};
use kvhsim_cli::suites::*;

fn main() {
    let grid = PhaseSpaceGrid::square(64, 8.0).unwrap();
    let h = spin_boson_hamiltonian(grid.clone(), 0.4, 1.1).to_hybrid(1.0).unwrap();
    let mut rng = rng_for(12345);
    let st = random_closure_state(&grid, 1.0, 1e-8, &mut rng);
    let deriv = closure_var_derivative(&h, &st).unwrap();
    let eps = 1e-6;
    for r0 in [3.0f64, 5.0, 6.0, 7.0] {
        let bump = ScalarField::from_fn(grid.clone(), move |q, p| {
            let r = (q * q + p * p).sqrt();
            (-(r - r0).powi(2) / 0.5).exp()
        });
        // A: traceless direction, D untouched
        let v = MatrixField::scalar_times_matrix(&bump, &pauli(1));
        let shifted = |s: f64| {
            ClosureState::new(st.p.add(&v.scale_re(s)), st.hbar, st.d_floor).unwrap()
        };
        let fd = (closure_hamiltonian(&h, &shifted(eps)).unwrap()
            - closure_hamiltonian(&h, &shifted(-eps)).unwrap())
            / (2.0 * eps);
        let an = deriv.dh_dp.matmul(&v).trace().re().integrate();
        // B: density-only derivative via the two-variable functional
        let d = st.density();
        let quot = |e: f64| {
            (closure_hamiltonian_two_var(&h, &d.add(&bump.scale(e)), &st.p, st.hbar, st.d_floor).unwrap()
                - closure_hamiltonian_two_var(&h, &d.sub(&bump.scale(e)), &st.p, st.hbar, st.d_floor).unwrap())
                / (2.0 * e)
        };
        let fd_d = (4.0 * quot(5e-7) - quot(1e-6)) / 3.0;
        let an_d = deriv.dh_dd.mul(&bump).integrate();
        println!(
            "r0={r0:.1}  traceless: fd={fd:+.6e} an={an:+.6e} diff={:.2e}   density: fd={fd_d:+.6e} an={an_d:+.6e} diff={:.2e}",
            (fd - an).abs(),
            (fd_d - an_d).abs()
        );
    }
}
