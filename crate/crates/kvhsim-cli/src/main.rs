use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kvhsim_cli::commands::{
    check_command, convergence_command, effective_output_dir, reduce_command, run_command,
};
use kvhsim_cli::config::{parse_config, RunConfig};

/// Phase-space simulator for hybrid quantum-classical dynamics.
#[derive(Parser)]
#[command(name = "kvhsim", version, about)]
struct Cli {
    /// Directory for output files; overrides the config's [output] dir.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate the configured model and write diagnostics + snapshot.
    Run { config: PathBuf },
    /// Run the seeded invariant suites (hermiticity, antisymmetry,
    /// derivative oracles, equivariance); nonzero exit on failure.
    Check { config: PathBuf },
    /// Run the model alongside a named reduction and report the maximum
    /// trajectory divergence.
    Reduce {
        config: PathBuf,
        /// classical | quantum | meanfield | ehrenfest
        #[arg(long)]
        against: String,
    },
    /// Self-convergence study over a dt ladder (ratio-2, at least three).
    Convergence {
        config: PathBuf,
        /// Comma-separated step sizes, e.g. 4e-3,2e-3,1e-3
        #[arg(long, value_delimiter = ',', required = true)]
        dts: Vec<f64>,
    },
}

fn load_config(path: &PathBuf) -> Result<RunConfig, i32> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        1
    })?;
    parse_config(&text).map_err(|errs| {
        for e in &errs {
            eprintln!("{}: {e}", path.display());
        }
        1
    })
}

fn main() -> ExitCode {
    // Numeric kernels are currently single-threaded; the knob is accepted
    // and validated so configs stay forward-compatible.
    if let Ok(v) = std::env::var("KVHSIM_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {}
            _ => {
                eprintln!("error: KVHSIM_THREADS must be a positive integer, got '{v}'");
                return ExitCode::from(1);
            }
        }
    }
    let cli = Cli::parse();
    let code = match &cli.cmd {
        Cmd::Run { config } => match load_config(config) {
            Ok(cfg) => run_command(&cfg, &effective_output_dir(&cfg, &cli.output_dir)),
            Err(c) => c,
        },
        Cmd::Check { config } => match load_config(config) {
            Ok(cfg) => check_command(&cfg),
            Err(c) => c,
        },
        Cmd::Reduce { config, against } => match load_config(config) {
            Ok(cfg) => reduce_command(&cfg, against),
            Err(c) => c,
        },
        Cmd::Convergence { config, dts } => match load_config(config) {
            Ok(cfg) => convergence_command(&cfg, dts, &effective_output_dir(&cfg, &cli.output_dir)),
            Err(c) => c,
        },
    };
    ExitCode::from(code as u8)
}
