//! Diagnostics CSV: `t,energy,mass,min_D,purity,<casimir cols>,<residual
//! cols>` with 17 significant digits, so identical runs produce identical
//! bytes.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::Path;

use kvhsim::dynamics::DiagnosticsRecord;

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.16e}"),
        None => "nan".into(),
    }
}

pub fn render_diagnostics(series: &[DiagnosticsRecord]) -> String {
    let mut out = String::new();
    let (casimir_keys, residual_keys): (Vec<&String>, Vec<&String>) = match series.first() {
        Some(r) => (r.casimirs.keys().collect(), r.residuals.keys().collect()),
        None => (Vec::new(), Vec::new()),
    };
    out.push_str("t,energy,mass,min_D,purity");
    for k in &casimir_keys {
        let _ = write!(out, ",casimir_{k}");
    }
    for k in &residual_keys {
        let _ = write!(out, ",res_{k}");
    }
    out.push('\n');
    for r in series {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            cell(Some(r.t)),
            cell(Some(r.energy)),
            cell(Some(r.total_mass)),
            cell(r.min_d),
            cell(r.purity)
        );
        for k in &casimir_keys {
            let _ = write!(out, ",{}", cell(r.casimirs.get(*k).copied()));
        }
        for k in &residual_keys {
            let _ = write!(out, ",{}", cell(r.residuals.get(*k).copied()));
        }
        out.push('\n');
    }
    out
}

pub fn write_diagnostics(path: &Path, series: &[DiagnosticsRecord]) -> io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(render_diagnostics(series).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn record(t: f64) -> DiagnosticsRecord {
        DiagnosticsRecord {
            t,
            energy: 1.5,
            total_mass: 1.0,
            min_d: Some(-1e-12),
            purity: None,
            casimirs: BTreeMap::from([("power2".to_string(), 0.5)]),
            berry_flux: None,
            residuals: BTreeMap::from([("marginal_classical".to_string(), 1e-9)]),
            notes: vec![],
        }
    }

    #[test]
    fn schema_and_precision() {
        let text = render_diagnostics(&[record(0.0), record(0.1)]);
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,energy,mass,min_D,purity,casimir_power2,res_marginal_classical"
        );
        let row = lines.next().unwrap();
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 7);
        assert_eq!(cols[1], "1.5000000000000000e0");
        assert_eq!(cols[4], "nan");
    }

    #[test]
    fn rendering_is_deterministic() {
        let series = [record(0.0), record(0.5)];
        assert_eq!(render_diagnostics(&series), render_diagnostics(&series));
    }
}
