//! INI-style run configuration: sections [grid], [model], [hamiltonian],
//! [initial], [integrator], [output].  Parsing collects every error with its
//! line number instead of stopping at the first.

use std::fmt;
use std::path::PathBuf;

use kvhsim::dynamics::{IntegratorConfig, Method, SpectralFilter};

pub const MODELS: [&str; 6] = ["kvh", "wave", "closure", "ehrenfest", "meanfield", "spin"];
pub const PRESETS: [&str; 2] = ["harmonic", "spin_boson"];
pub const MAX_DEGREE: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigErrorKind {
    UnknownKey,
    RangeError,
    MissingSection,
    Syntax,
}

#[derive(Debug, Clone)]
pub struct ConfigError {
    pub line: usize,
    pub kind: ConfigErrorKind,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ConfigErrorKind::UnknownKey => "unknown key",
            ConfigErrorKind::RangeError => "range error",
            ConfigErrorKind::MissingSection => "missing section",
            ConfigErrorKind::Syntax => "syntax error",
        };
        write!(f, "line {}: {}: {}", self.line, kind, self.message)
    }
}

/// Monomial list: coefficient of q^a p^b per term.
pub type PolySpec = Vec<(u32, u32, f64)>;

#[derive(Debug, Clone)]
pub enum HamiltonianSpec {
    Preset {
        name: String,
        lambda: f64,
        omega_s: f64,
    },
    Polynomial {
        h0: PolySpec,
        coupling: [PolySpec; 3],
    },
}

#[derive(Debug, Clone)]
pub struct InitialSpec {
    pub center: (f64, f64),
    pub width: (f64, f64),
    /// Linear phase S0 = phase.0 * q + phase.1 * p.
    pub phase: (f64, f64),
    /// Uniform Bloch direction, normalized at build time.
    pub bloch: [f64; 3],
    /// Optional z-dependent direction via polynomial angles; overrides
    /// `bloch` when present.
    pub theta: Option<PolySpec>,
    pub phi: Option<PolySpec>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: String,
    pub nq: usize,
    pub np: usize,
    pub q_half: f64,
    pub p_half: f64,
    pub hbar: f64,
    pub d_floor: f64,
    pub hamiltonian: HamiltonianSpec,
    pub initial: InitialSpec,
    pub integrator: IntegratorConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub write_snapshots: bool,
}

struct Raw {
    section: String,
    key: String,
    value: String,
    line: usize,
}

fn parse_poly_tokens(value: &str, line: usize, errors: &mut Vec<ConfigError>) -> PolySpec {
    let mut out = Vec::new();
    for token in value.split_whitespace() {
        let Some((mon, coeff)) = token.split_once(':') else {
            errors.push(ConfigError {
                line,
                kind: ConfigErrorKind::Syntax,
                message: format!("term '{token}' is not of the form monomial:coefficient"),
            });
            continue;
        };
        let coeff: f64 = match coeff.parse() {
            Ok(c) => c,
            Err(_) => {
                errors.push(ConfigError {
                    line,
                    kind: ConfigErrorKind::RangeError,
                    message: format!("coefficient '{coeff}' is not a number"),
                });
                continue;
            }
        };
        let Some((a, b)) = parse_monomial(mon) else {
            errors.push(ConfigError {
                line,
                kind: ConfigErrorKind::Syntax,
                message: format!("monomial '{mon}' not understood (examples: 1, q, p2, q2p1)"),
            });
            continue;
        };
        if a + b > MAX_DEGREE {
            errors.push(ConfigError {
                line,
                kind: ConfigErrorKind::RangeError,
                message: format!("monomial q^{a} p^{b} exceeds total degree {MAX_DEGREE}"),
            });
            continue;
        }
        out.push((a, b, coeff));
    }
    out
}

/// "1" | "q" | "p" | "q2" | "qp" | "q2p3" ...
fn parse_monomial(mon: &str) -> Option<(u32, u32)> {
    if mon == "1" {
        return Some((0, 0));
    }
    let mut chars = mon.chars().peekable();
    let take = |var: char, chars: &mut std::iter::Peekable<std::str::Chars>| -> Option<u32> {
        if chars.peek() == Some(&var) {
            chars.next();
            let mut digits = String::new();
            while chars.peek().is_some_and(|c| c.is_ascii_digit()) {
                digits.push(chars.next().unwrap());
            }
            if digits.is_empty() {
                Some(1)
            } else {
                digits.parse().ok()
            }
        } else {
            Some(0)
        }
    };
    let a = take('q', &mut chars)?;
    let b = take('p', &mut chars)?;
    if chars.next().is_some() || (a == 0 && b == 0) {
        None
    } else {
        Some((a, b))
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, Vec<ConfigError>> {
    let mut errors: Vec<ConfigError> = Vec::new();
    let mut raws: Vec<Raw> = Vec::new();
    let mut section = String::new();
    let mut seen_sections: Vec<String> = Vec::new();

    const SECTIONS: [&str; 6] = [
        "grid",
        "model",
        "hamiltonian",
        "initial",
        "integrator",
        "output",
    ];

    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line
            .split_once('#')
            .map_or(raw_line, |(l, _)| l)
            .split_once(';')
            .map_or_else(
                || raw_line.split_once('#').map_or(raw_line, |(l, _)| l),
                |(l, _)| l,
            )
            .trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            if SECTIONS.contains(&name) {
                section = name.to_string();
                seen_sections.push(section.clone());
            } else {
                errors.push(ConfigError {
                    line,
                    kind: ConfigErrorKind::UnknownKey,
                    message: format!("unknown section [{name}]; valid: {}", SECTIONS.join(", ")),
                });
                section = String::new();
            }
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            errors.push(ConfigError {
                line,
                kind: ConfigErrorKind::Syntax,
                message: format!("expected key = value, got '{content}'"),
            });
            continue;
        };
        if section.is_empty() {
            errors.push(ConfigError {
                line,
                kind: ConfigErrorKind::Syntax,
                message: "key appears before any valid section header".into(),
            });
            continue;
        }
        raws.push(Raw {
            section: section.clone(),
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            line,
        });
    }

    for required in ["model", "hamiltonian"] {
        if !seen_sections.iter().any(|s| s == required) {
            errors.push(ConfigError {
                line: 0,
                kind: ConfigErrorKind::MissingSection,
                message: format!("section [{required}] is required"),
            });
        }
    }

    // Defaults.
    let mut model = String::new();
    let mut nq = 128usize;
    let mut np = 128usize;
    let mut q_half = 8.0f64;
    let mut p_half = 8.0f64;
    let mut hbar = 1.0f64;
    let mut d_floor = 1e-8f64;
    let mut preset: Option<(String, usize)> = None;
    let mut lambda = 0.5f64;
    let mut omega_s = 1.0f64;
    let mut h0: Option<PolySpec> = None;
    let mut coupling: [PolySpec; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut initial = InitialSpec {
        center: (1.0, 0.0),
        width: (1.0, 1.0),
        phase: (0.0, 0.0),
        bloch: [0.0, 0.0, 1.0],
        theta: None,
        phi: None,
    };
    let mut method = Method::Rk4;
    let mut dt = 1e-3f64;
    let mut t_final = 10.0f64;
    let mut snapshot_every = 100usize;
    let mut filter = Some(SpectralFilter::standard());
    let mut output_dir = PathBuf::from("out");
    let mut seed = 0u64;
    let mut write_snapshots = true;

    macro_rules! num {
        ($raw:expr, $target:expr, $check:expr, $desc:expr) => {
            match $raw.value.parse() {
                Ok(v) if $check(&v) => $target = v,
                Ok(_) | Err(_) => errors.push(ConfigError {
                    line: $raw.line,
                    kind: ConfigErrorKind::RangeError,
                    message: format!("{} must be {}, got '{}'", $raw.key, $desc, $raw.value),
                }),
            }
        };
    }

    for raw in &raws {
        match (raw.section.as_str(), raw.key.as_str()) {
            ("grid", "n") => {
                match raw.value.parse::<usize>() {
                    Ok(v) if v >= 8 && v % 2 == 0 => {
                        nq = v;
                        np = v;
                    }
                    _ => errors.push(ConfigError {
                        line: raw.line,
                        kind: ConfigErrorKind::RangeError,
                        message: format!("n must be an even integer >= 8, got '{}'", raw.value),
                    }),
                };
            }
            ("grid", "nq") => num!(raw, nq, |v: &usize| *v >= 8 && v % 2 == 0, "even and >= 8"),
            ("grid", "np") => num!(raw, np, |v: &usize| *v >= 8 && v % 2 == 0, "even and >= 8"),
            ("grid", "half") => {
                match raw.value.parse::<f64>() {
                    Ok(v) if v > 0.0 && v.is_finite() => {
                        q_half = v;
                        p_half = v;
                    }
                    _ => errors.push(ConfigError {
                        line: raw.line,
                        kind: ConfigErrorKind::RangeError,
                        message: format!("half must be a positive number, got '{}'", raw.value),
                    }),
                };
            }
            ("grid", "q_half") => num!(raw, q_half, |v: &f64| *v > 0.0 && v.is_finite(), "positive"),
            ("grid", "p_half") => num!(raw, p_half, |v: &f64| *v > 0.0 && v.is_finite(), "positive"),
            ("model", "name") => {
                if MODELS.contains(&raw.value.as_str()) {
                    model = raw.value.clone();
                } else {
                    errors.push(ConfigError {
                        line: raw.line,
                        kind: ConfigErrorKind::UnknownKey,
                        message: format!(
                            "unknown model '{}'; valid models: {}",
                            raw.value,
                            MODELS.join(", ")
                        ),
                    });
                }
            }
            ("model", "hbar") => num!(raw, hbar, |v: &f64| *v > 0.0 && v.is_finite(), "positive"),
            ("model", "d_floor") => num!(
                raw,
                d_floor,
                |v: &f64| *v > 0.0 && *v < 1.0,
                "in (0, 1)"
            ),
            ("hamiltonian", "preset") => {
                if PRESETS.contains(&raw.value.as_str()) {
                    preset = Some((raw.value.clone(), raw.line));
                } else {
                    errors.push(ConfigError {
                        line: raw.line,
                        kind: ConfigErrorKind::UnknownKey,
                        message: format!(
                            "unknown preset '{}'; valid presets: {}",
                            raw.value,
                            PRESETS.join(", ")
                        ),
                    });
                }
            }
            ("hamiltonian", "lambda") => num!(raw, lambda, |v: &f64| v.is_finite(), "a number"),
            ("hamiltonian", "omega_s") => num!(raw, omega_s, |v: &f64| v.is_finite(), "a number"),
            ("hamiltonian", "h0") => h0 = Some(parse_poly_tokens(&raw.value, raw.line, &mut errors)),
            ("hamiltonian", "hx") => {
                coupling[0] = parse_poly_tokens(&raw.value, raw.line, &mut errors)
            }
            ("hamiltonian", "hy") => {
                coupling[1] = parse_poly_tokens(&raw.value, raw.line, &mut errors)
            }
            ("hamiltonian", "hz") => {
                coupling[2] = parse_poly_tokens(&raw.value, raw.line, &mut errors)
            }
            ("initial", "center_q") => {
                num!(raw, initial.center.0, |v: &f64| v.is_finite(), "a number")
            }
            ("initial", "center_p") => {
                num!(raw, initial.center.1, |v: &f64| v.is_finite(), "a number")
            }
            ("initial", "width_q") => num!(
                raw,
                initial.width.0,
                |v: &f64| *v > 0.0 && v.is_finite(),
                "positive"
            ),
            ("initial", "width_p") => num!(
                raw,
                initial.width.1,
                |v: &f64| *v > 0.0 && v.is_finite(),
                "positive"
            ),
            ("initial", "phase_q") => {
                num!(raw, initial.phase.0, |v: &f64| v.is_finite(), "a number")
            }
            ("initial", "phase_p") => {
                num!(raw, initial.phase.1, |v: &f64| v.is_finite(), "a number")
            }
            ("initial", "bloch") => {
                let parts: Vec<f64> = raw
                    .value
                    .split(',')
                    .filter_map(|s| s.trim().parse().ok())
                    .collect();
                if parts.len() == 3 && parts.iter().any(|v| *v != 0.0) {
                    initial.bloch = [parts[0], parts[1], parts[2]];
                } else {
                    errors.push(ConfigError {
                        line: raw.line,
                        kind: ConfigErrorKind::RangeError,
                        message: format!(
                            "bloch must be three comma-separated numbers, not all zero, got '{}'",
                            raw.value
                        ),
                    });
                }
            }
            ("initial", "theta") => {
                initial.theta = Some(parse_poly_tokens(&raw.value, raw.line, &mut errors))
            }
            ("initial", "phi") => {
                initial.phi = Some(parse_poly_tokens(&raw.value, raw.line, &mut errors))
            }
            ("integrator", "method") => match raw.value.as_str() {
                "rk4" => method = Method::Rk4,
                "midpoint" => method = Method::Midpoint,
                other => errors.push(ConfigError {
                    line: raw.line,
                    kind: ConfigErrorKind::UnknownKey,
                    message: format!("unknown method '{other}'; valid: rk4, midpoint"),
                }),
            },
            ("integrator", "dt") => num!(raw, dt, |v: &f64| *v > 0.0 && v.is_finite(), "positive"),
            ("integrator", "t_final") => {
                num!(raw, t_final, |v: &f64| *v > 0.0 && v.is_finite(), "positive")
            }
            ("integrator", "snapshot_every") => {
                num!(raw, snapshot_every, |v: &usize| *v >= 1, ">= 1")
            }
            ("integrator", "filter") => match raw.value.as_str() {
                "on" | "true" | "1" => filter = Some(SpectralFilter::standard()),
                "off" | "false" | "0" => filter = None,
                other => errors.push(ConfigError {
                    line: raw.line,
                    kind: ConfigErrorKind::RangeError,
                    message: format!("filter must be on or off, got '{other}'"),
                }),
            },
            ("output", "dir") => output_dir = PathBuf::from(&raw.value),
            ("output", "seed") => num!(raw, seed, |_: &u64| true, "an unsigned integer"),
            ("output", "write_snapshots") => match raw.value.as_str() {
                "true" | "1" | "yes" => write_snapshots = true,
                "false" | "0" | "no" => write_snapshots = false,
                other => errors.push(ConfigError {
                    line: raw.line,
                    kind: ConfigErrorKind::RangeError,
                    message: format!("write_snapshots must be a boolean, got '{other}'"),
                }),
            },
            (section, key) => errors.push(ConfigError {
                line: raw.line,
                kind: ConfigErrorKind::UnknownKey,
                message: format!("unknown key '{key}' in section [{section}]"),
            }),
        }
    }

    let name_key_seen = raws
        .iter()
        .any(|r| r.section == "model" && r.key == "name");
    if model.is_empty() && !name_key_seen && seen_sections.iter().any(|s| s == "model") {
        errors.push(ConfigError {
            line: 0,
            kind: ConfigErrorKind::MissingSection,
            message: format!("[model] must set name (one of {})", MODELS.join(", ")),
        });
    }

    let hamiltonian = if let Some((name, _)) = preset {
        HamiltonianSpec::Preset {
            name,
            lambda,
            omega_s,
        }
    } else if let Some(h0) = h0 {
        HamiltonianSpec::Polynomial { h0, coupling }
    } else {
        if seen_sections.iter().any(|s| s == "hamiltonian") {
            errors.push(ConfigError {
                line: 0,
                kind: ConfigErrorKind::MissingSection,
                message: "[hamiltonian] must set either preset or h0".into(),
            });
        }
        HamiltonianSpec::Preset {
            name: "harmonic".into(),
            lambda,
            omega_s,
        }
    };

    if !errors.is_empty() {
        return Err(errors);
    }
    Ok(RunConfig {
        model,
        nq,
        np,
        q_half,
        p_half,
        hbar,
        d_floor,
        hamiltonian,
        initial,
        integrator: IntegratorConfig {
            method,
            dt,
            t_final,
            snapshot_every,
            filter,
        },
        output_dir,
        seed,
        write_snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
[model]
name = closure
[hamiltonian]
preset = spin_boson
";

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.model, "closure");
        assert_eq!((cfg.nq, cfg.np), (128, 128));
        assert_eq!((cfg.q_half, cfg.p_half), (8.0, 8.0));
        assert_eq!(cfg.integrator.dt, 1e-3);
        assert_eq!(cfg.hbar, 1.0);
        match cfg.hamiltonian {
            HamiltonianSpec::Preset { ref name, .. } => assert_eq!(name, "spin_boson"),
            _ => panic!("expected preset"),
        }
    }

    #[test]
    fn negative_dt_is_a_range_error_with_line() {
        let text = format!("{MINIMAL}[integrator]\ndt = -1\n");
        let errs = parse_config(&text).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].kind, ConfigErrorKind::RangeError);
        assert_eq!(errs[0].line, 7);
        assert!(errs[0].message.contains("dt"));
    }

    #[test]
    fn unknown_model_lists_valid_models() {
        let text = "[model]\nname = schroedinger\n[hamiltonian]\npreset = harmonic\n";
        let errs = parse_config(text).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].kind, ConfigErrorKind::UnknownKey);
        for m in MODELS {
            assert!(errs[0].message.contains(m), "should list {m}");
        }
    }

    #[test]
    fn all_errors_are_collected() {
        let text = "[model]\nname = nope\nbogus = 1\n[hamiltonian]\npreset = nope2\n[grid]\nn = 7\n";
        let errs = parse_config(text).unwrap_err();
        assert!(errs.len() >= 4, "got {errs:?}");
        let lines: Vec<usize> = errs.iter().map(|e| e.line).collect();
        assert!(lines.contains(&2) && lines.contains(&3) && lines.contains(&5));
    }

    #[test]
    fn missing_sections_reported() {
        let errs = parse_config("[grid]\nn = 64\n").unwrap_err();
        assert!(errs
            .iter()
            .any(|e| e.kind == ConfigErrorKind::MissingSection && e.message.contains("[model]")));
        assert!(errs.iter().any(
            |e| e.kind == ConfigErrorKind::MissingSection && e.message.contains("[hamiltonian]")
        ));
    }

    #[test]
    fn polynomial_hamiltonian_parses() {
        let text = "
[model]
name = closure
[hamiltonian]
h0 = q2:0.5 p2:0.5
hx = q:0.4
hz = 1:1.0
";
        let cfg = parse_config(text).unwrap();
        match cfg.hamiltonian {
            HamiltonianSpec::Polynomial { h0, coupling } => {
                assert_eq!(h0, vec![(2, 0, 0.5), (0, 2, 0.5)]);
                assert_eq!(coupling[0], vec![(1, 0, 0.4)]);
                assert!(coupling[1].is_empty());
                assert_eq!(coupling[2], vec![(0, 0, 1.0)]);
            }
            _ => panic!("expected polynomial"),
        }
    }

    #[test]
    fn degree_cap_and_bad_tokens() {
        let text = "
[model]
name = kvh
[hamiltonian]
h0 = q3p2:1.0 zz:2 q:nan3
";
        let errs = parse_config(text).unwrap_err();
        assert_eq!(errs.len(), 3, "{errs:?}");
    }

    #[test]
    fn monomials() {
        assert_eq!(parse_monomial("1"), Some((0, 0)));
        assert_eq!(parse_monomial("q"), Some((1, 0)));
        assert_eq!(parse_monomial("p3"), Some((0, 3)));
        assert_eq!(parse_monomial("q2p1"), Some((2, 1)));
        assert_eq!(parse_monomial("qp"), Some((1, 1)));
        assert_eq!(parse_monomial("pq"), None);
        assert_eq!(parse_monomial(""), None);
        assert_eq!(parse_monomial("x"), None);
    }
}
