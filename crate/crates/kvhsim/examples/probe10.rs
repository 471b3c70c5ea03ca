use kvhsim::closure::ClosureState;
use kvhsim::dynamics::*;
use kvhsim::field::{ComplexField, ScalarField};
use kvhsim::grid::PhaseSpaceGrid;
use kvhsim::spin::{spin_boson_hamiltonian, spin_from_density, spin_velocity};
use num_complex::Complex64 as C64;
use std::sync::Arc;

fn mk(grid: &Arc<PhaseSpaceGrid>, d_floor: f64) -> ClosureState {
    let d = ScalarField::from_fn(grid.clone(), |q: f64, p: f64| {
        (-((q - 1.0).powi(2) + p * p) / 2.0).exp()
    });
    let mass = d.integrate();
    let d = d.scale(1.0 / mass);
    let one = ComplexField::from_fn(grid.clone(), |_, _| C64::new(1.0, 0.0));
    let zero = ComplexField::zeros(grid.clone());
    ClosureState::pure(&d, &[one, zero], 1.0, d_floor).unwrap()
}

fn main() {
    let grid = PhaseSpaceGrid::square(64, 8.0).unwrap();
    // Diagnose where the degenerate mass sits and how big the velocity gets
    // as the run approaches death, stepping manually.
    let sh = spin_boson_hamiltonian(grid.clone(), 0.5, 1.0);
    let mut st = ModelState::Spin(spin_from_density(&mk(&grid, 1e-8)).unwrap());
    let model = Model::Spin(sh.clone());
    let cfg = IntegratorConfig {
        method: Method::Rk4,
        dt: 1e-3,
        t_final: 10.0,
        snapshot_every: 100,
        filter: Some(SpectralFilter::standard()),
    };
    for k in 1..=1700usize {
        match step(&model, &st, &cfg) {
            Ok(next) => st = next,
            Err(e) => {
                println!("step {k} failed: {e}");
                break;
            }
        }
        if k % 100 == 0 {
            let ModelState::Spin(ref s) = st else { unreachable!() };
            let d = &s.d;
            let dmax = d.max_abs();
            let eps = 1e-8 * dmax;
            // Mass below the floor, split into bulk (r < 5) and far field.
            let mut below_bulk = 0.0;
            let mut below_far = 0.0;
            let mut min_v = f64::INFINITY;
            let mut min_pos = (0.0, 0.0);
            let (nq, np) = grid.shape();
            for i in 0..nq {
                for j in 0..np {
                    let v = d.values[(i, j)];
                    let (q, p) = (grid.q_at(i), grid.p_at(j));
                    if v < min_v {
                        min_v = v;
                        min_pos = (q, p);
                    }
                    if v < eps {
                        if q * q + p * p < 25.0 {
                            below_bulk += v.abs();
                        } else {
                            below_far += v.abs();
                        }
                    }
                }
            }
            let cell = grid.cell_area();
            let vel = spin_velocity(&sh, s).unwrap();
            let vmax = vel.comp_q.max_abs().max(vel.comp_p.max_abs());
            println!(
                "t={:.2} minD={:+.2e}@({:+.2},{:+.2}) below_bulk={:.2e} below_far={:.2e} vmax={:.2e}",
                k as f64 * 1e-3,
                min_v,
                min_pos.0,
                min_pos.1,
                below_bulk * cell,
                below_far * cell,
                vmax
            );
        }
    }
    println!("--- dt scan, spin form, filtered, to t=3 ---");
    for dt in [5e-4, 2.5e-4] {
        let cfg = IntegratorConfig {
            method: Method::Rk4,
            dt,
            t_final: 3.0,
            snapshot_every: (0.5 / dt) as usize,
            filter: Some(SpectralFilter::standard()),
        };
        let st = ModelState::Spin(spin_from_density(&mk(&grid, 1e-8)).unwrap());
        let out = run(&model, &st, &cfg).unwrap();
        let last = out.series.last().unwrap();
        let e0 = out.series[0].energy;
        println!(
            "dt={dt:.1e} last_t={:.3} dE/E={:.2e} aborted={:?}",
            last.t,
            (last.energy - e0) / e0,
            out.aborted.as_ref().map(|e| e.to_string())
        );
    }
}
