//! Implementations of the run / check / reduce / convergence subcommands.
//! Each returns a process exit code: 0 success, 1 usage or hard error,
//! 2 aborted simulation.

use std::path::{Path, PathBuf};

use kvhsim::dynamics::{
    convergence_study, diagnostics, rhs, run, step, DiagnosticsRecord, Model, ModelState,
};
use kvhsim::hybrid::HybridHamiltonian;
use kvhsim::kvh::liouville_rhs;
use kvhsim::{Result, ScalarField};
use ndarray::Array2;
use num_complex::Complex64 as C64;

use crate::build::build;
use crate::config::RunConfig;
use crate::csvout::write_diagnostics;
use crate::snapshot::write_snapshot;
use crate::suites::run_check_suites;

fn ensure_dir(dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)
}

fn fail(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    1
}

pub fn run_command(cfg: &RunConfig, output_dir: &Path) -> i32 {
    let (model, state) = match build(cfg) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    if let Err(e) = ensure_dir(output_dir) {
        return fail(format!("cannot create {}: {e}", output_dir.display()));
    }
    let out = match run(&model, &state, &cfg.integrator) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    let csv_path = output_dir.join("diagnostics.csv");
    if let Err(e) = write_diagnostics(&csv_path, &out.series) {
        return fail(format!("writing {}: {e}", csv_path.display()));
    }
    if cfg.write_snapshots {
        let snap_path = output_dir.join("final.snap");
        let t_last = out.series.last().map_or(0.0, |r| r.t);
        if let Err(e) = write_snapshot(&snap_path, &out.state, t_last) {
            return fail(format!("writing {}: {e}", snap_path.display()));
        }
    }
    let last = out.series.last().expect("series has the initial record");
    println!(
        "{} run: {} samples to t={:.6}, energy {:.6e} -> {:.6e}",
        model.name(),
        out.series.len(),
        last.t,
        out.series[0].energy,
        last.energy
    );
    if let Some(e) = out.aborted {
        eprintln!("run aborted: {e}");
        return 2;
    }
    0
}

pub fn check_command(cfg: &RunConfig) -> i32 {
    let mut failed = 0;
    for c in run_check_suites(cfg.seed) {
        let verdict = if c.passed { "pass" } else { "FAIL" };
        println!("{verdict}  {}: {}", c.name, c.detail);
        if !c.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} check suite(s) failed");
        1
    } else {
        0
    }
}

/// Scalar RK4 step for the reference Liouville equation.
fn liouville_step(h: &ScalarField, rho: &ScalarField, dt: f64) -> Result<ScalarField> {
    let k1 = liouville_rhs(h, rho)?;
    let k2 = liouville_rhs(h, &rho.add(&k1.scale(0.5 * dt)))?;
    let k3 = liouville_rhs(h, &rho.add(&k2.scale(0.5 * dt)))?;
    let k4 = liouville_rhs(h, &rho.add(&k3.scale(dt)))?;
    Ok(rho
        .add(&k1.scale(dt / 6.0))
        .add(&k2.scale(dt / 3.0))
        .add(&k3.scale(dt / 3.0))
        .add(&k4.scale(dt / 6.0)))
}

/// RK4 step for the reference von Neumann equation with constant matrix.
fn von_neumann_step(m: &Array2<C64>, rho: &Array2<C64>, hbar: f64, dt: f64) -> Array2<C64> {
    let f = |r: &Array2<C64>| -> Array2<C64> {
        let comm = m.dot(r) - r.dot(m);
        comm.mapv(|z| z * C64::new(0.0, -1.0 / hbar))
    };
    let k1 = f(rho);
    let k2 = f(&(rho + &k1.mapv(|z| z * (0.5 * dt))));
    let k3 = f(&(rho + &k2.mapv(|z| z * (0.5 * dt))));
    let k4 = f(&(rho + &k3.mapv(|z| z * dt)));
    rho + &k1.mapv(|z| z * (dt / 6.0))
        + &k2.mapv(|z| z * (dt / 3.0))
        + &k3.mapv(|z| z * (dt / 3.0))
        + &k4.mapv(|z| z * (dt / 6.0))
}

fn classical_marginal(state: &ModelState) -> Result<ScalarField> {
    match state {
        ModelState::Closure(st) => Ok(st.density()),
        ModelState::MeanField(st) => Ok(st.d.clone()),
        ModelState::Spin(st) => Ok(st.d.clone()),
        _ => Err(kvhsim::SimError::InvalidConfig(
            "state has no direct classical marginal".into(),
        )),
    }
}

fn quantum_marginal(state: &ModelState) -> Result<Array2<C64>> {
    match state {
        ModelState::Closure(st) => Ok(st.quantum_density()),
        ModelState::MeanField(st) => Ok(st.rho_q.clone()),
        _ => Err(kvhsim::SimError::InvalidConfig(
            "state has no direct quantum marginal".into(),
        )),
    }
}

fn frob_dist(a: &Array2<C64>, b: &Array2<C64>) -> f64 {
    (a - b).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn constant_matrix_of(h: &HybridHamiltonian) -> Result<Array2<C64>> {
    let n = h.n();
    let mut m = Array2::from_elem((n, n), C64::new(0.0, 0.0));
    for (f, mat) in h.terms() {
        let spread = f.max() - f.min();
        if spread.abs() > 1e-12 * f.max_abs().max(1.0) {
            return Err(kvhsim::SimError::InvalidConfig(
                "quantum reduction needs a hamiltonian that is constant on phase space".into(),
            ));
        }
        let c = f.values[(0, 0)];
        m = m + mat.mapv(|z| z * c);
    }
    Ok(m)
}

pub fn reduce_command(cfg: &RunConfig, against: &str) -> i32 {
    match reduce_inner(cfg, against) {
        Ok(div) => {
            println!("max divergence vs {against}: {div:.6e}");
            0
        }
        Err(e) => fail(e),
    }
}

fn reduce_inner(cfg: &RunConfig, against: &str) -> Result<f64> {
    let (model, state0) = build(cfg)?;
    let it = &cfg.integrator;
    it.validate()?;
    let n_steps = (it.t_final / it.dt).round().max(1.0) as usize;
    let mut state = state0.clone();
    let mut max_div = 0.0f64;

    match against {
        "classical" => {
            // Reference: direct Liouville transport of the initial marginal
            // under the scalar part of the hamiltonian.
            let h0 = match &model {
                Model::Closure(h) | Model::Ehrenfest(h) | Model::MeanField(h) | Model::Wave(h) => {
                    h.terms()
                        .iter()
                        .fold(ScalarField::zeros(h.grid().clone()), |acc, (f, m)| {
                            // Tr m / n picks out the scalar (identity) part.
                            let tr = (0..h.n()).map(|a| m[(a, a)].re).sum::<f64>() / h.n() as f64;
                            acc.add(&f.scale(tr))
                        })
                }
                Model::Spin(sh) => sh.h0.clone(),
                Model::Kvh(h) => h.clone(),
            };
            let mut rho = classical_marginal(&state)?;
            let norm0 = rho.l2_norm();
            for k in 1..=n_steps {
                state = step(&model, &state, it)?;
                rho = liouville_step(&h0, &rho, it.dt)?;
                if k % it.snapshot_every == 0 || k == n_steps {
                    let d = classical_marginal(&state)?;
                    max_div = max_div.max(d.sub(&rho).l2_norm() / norm0);
                }
            }
        }
        "quantum" => {
            let m = match &model {
                Model::Closure(h) | Model::Ehrenfest(h) | Model::MeanField(h) => {
                    constant_matrix_of(h)?
                }
                _ => {
                    return Err(kvhsim::SimError::InvalidConfig(
                        "quantum reduction applies to the density-matrix models".into(),
                    ))
                }
            };
            let hbar = cfg.hbar;
            let mut rho_ref = quantum_marginal(&state)?;
            for k in 1..=n_steps {
                state = step(&model, &state, it)?;
                rho_ref = von_neumann_step(&m, &rho_ref, hbar, it.dt);
                if k % it.snapshot_every == 0 || k == n_steps {
                    max_div = max_div.max(frob_dist(&quantum_marginal(&state)?, &rho_ref));
                }
            }
        }
        "meanfield" | "ehrenfest" => {
            let mut ref_cfg = cfg.clone();
            ref_cfg.model = against.to_string();
            let (ref_model, mut ref_state) = build(&ref_cfg)?;
            for k in 1..=n_steps {
                state = step(&model, &state, it)?;
                ref_state = step(&ref_model, &ref_state, it)?;
                if k % it.snapshot_every == 0 || k == n_steps {
                    let d = classical_marginal(&state)?;
                    let dr = classical_marginal(&ref_state)?;
                    let mut div = d.sub(&dr).l2_norm() / d.l2_norm().max(1e-300);
                    if let (Ok(q), Ok(qr)) =
                        (quantum_marginal(&state), quantum_marginal(&ref_state))
                    {
                        div = div.max(frob_dist(&q, &qr));
                    }
                    max_div = max_div.max(div);
                }
            }
        }
        other => {
            return Err(kvhsim::SimError::InvalidConfig(format!(
                "unknown reduction '{other}'; valid: classical, quantum, meanfield, ehrenfest"
            )))
        }
    }
    Ok(max_div)
}

pub fn convergence_command(cfg: &RunConfig, dts: &[f64], output_dir: &Path) -> i32 {
    let (model, state) = match build(cfg) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let study = match convergence_study(&model, &state, &cfg.integrator, dts) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    println!("{:>12}  {:>14}", "dt", "error");
    let mut csv = String::from("dt,error\n");
    for row in &study.rows {
        println!("{:>12.6e}  {:>14.6e}", row.dt, row.error);
        csv.push_str(&format!("{:.16e},{:.16e}\n", row.dt, row.error));
    }
    match study.order {
        Some(p) => println!("fitted order: {p:.3}"),
        None => println!("fitted order: undefined (errors at rounding level)"),
    }
    if let Err(e) = ensure_dir(output_dir) {
        return fail(format!("cannot create {}: {e}", output_dir.display()));
    }
    let path = output_dir.join("convergence.csv");
    if let Err(e) = std::fs::write(&path, csv) {
        return fail(format!("writing {}: {e}", path.display()));
    }
    0
}

/// Resolve the effective output directory: --output-dir wins over the
/// config's [output] dir.
pub fn effective_output_dir(cfg: &RunConfig, cli_dir: &Option<PathBuf>) -> PathBuf {
    cli_dir.clone().unwrap_or_else(|| cfg.output_dir.clone())
}

/// Sanity and consistency helpers shared with tests.
pub fn initial_diagnostics(cfg: &RunConfig) -> Result<DiagnosticsRecord> {
    let (model, state) = build(cfg)?;
    rhs(&model, &state)?;
    Ok(diagnostics(&model, &state, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn classical_reduction_on_harmonic_is_tiny() {
        // Uncoupled harmonic closure vs direct Liouville over a short window.
        let cfg = parse_config(
            "[grid]\nn = 48\n[model]\nname = closure\n[hamiltonian]\npreset = harmonic\n[integrator]\ndt = 2e-3\nt_final = 0.2\nsnapshot_every = 25\nfilter = off\n",
        )
        .unwrap();
        let div = reduce_inner(&cfg, "classical").unwrap();
        assert!(div < 1e-8, "divergence {div:.3e}");
    }

    #[test]
    fn quantum_reduction_with_constant_hamiltonian_is_tiny() {
        let cfg = parse_config(
            "[grid]\nn = 48\n[model]\nname = closure\n[hamiltonian]\nh0 = 1:0.0\nhz = 1:1.0\n[initial]\nbloch = 1, 0, 0\n[integrator]\ndt = 2e-3\nt_final = 0.2\nsnapshot_every = 25\nfilter = off\n",
        )
        .unwrap();
        let div = reduce_inner(&cfg, "quantum").unwrap();
        assert!(div < 1e-8, "divergence {div:.3e}");
    }

    #[test]
    fn quantum_reduction_rejects_phase_space_dependent_hamiltonian() {
        let cfg = parse_config(
            "[grid]\nn = 32\n[model]\nname = closure\n[hamiltonian]\npreset = spin_boson\n",
        )
        .unwrap();
        assert!(reduce_inner(&cfg, "quantum").is_err());
    }

    #[test]
    fn meanfield_reduction_runs() {
        let cfg = parse_config(
            "[grid]\nn = 48\n[model]\nname = closure\n[hamiltonian]\npreset = spin_boson\nlambda = 0.2\n[integrator]\ndt = 2e-3\nt_final = 0.1\nsnapshot_every = 50\nfilter = off\n",
        )
        .unwrap();
        let div = reduce_inner(&cfg, "meanfield").unwrap();
        assert!(div.is_finite());
    }

    #[test]
    fn run_command_writes_outputs_and_exits_zero() {
        let cfg = parse_config(
            "[grid]\nn = 48\n[model]\nname = spin\n[hamiltonian]\npreset = spin_boson\n[integrator]\ndt = 1e-2\nt_final = 0.05\nsnapshot_every = 2\n",
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let code = run_command(&cfg, dir.path());
        assert_eq!(code, 0);
        assert!(dir.path().join("diagnostics.csv").exists());
        assert!(dir.path().join("final.snap").exists());
        let text = std::fs::read_to_string(dir.path().join("diagnostics.csv")).unwrap();
        assert!(text.starts_with("t,energy,mass,min_D,purity"));
    }

    #[test]
    fn check_command_passes() {
        let cfg = parse_config(
            "[model]\nname = closure\n[hamiltonian]\npreset = spin_boson\n[output]\nseed = 42\n",
        )
        .unwrap();
        assert_eq!(check_command(&cfg), 0);
    }
}
