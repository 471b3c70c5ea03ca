//! Binary field snapshots.
//!
//! Layout (little-endian, 80-byte header, no padding):
//!   magic "KVHB" (4) | version u32 (4) | nq, np, n_levels u32 (12) |
//!   payload kind u32 (4) | extents q_min,q_max,p_min,p_max f64 (32) |
//!   hbar f64 (8) | t f64 (8) | d_floor f64 (8)
//! followed by the payload as raw f64 data in row-major grid order:
//!   kind 0 (kvh):       psi re,im interleaved, nq*np entries
//!   kind 1 (wave):      n_levels components, each as kind 0
//!   kind 2 (closure):   matrix entries (q,p,row,col) re,im interleaved
//!   kind 3 (meanfield): D (nq*np f64), then rho_q (n^2 complex)
//!   kind 4 (spin):      D, s1, s2, s3 (4 * nq*np f64)

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use kvhsim::closure::ClosureState;
use kvhsim::dynamics::{MeanFieldState, ModelState};
use kvhsim::hybrid::HybridWavefunction;
use kvhsim::kvh::KoopmanWavefunction;
use kvhsim::matrix_field::MatrixField;
use kvhsim::{ComplexField, PhaseSpaceGrid, ScalarField};
use ndarray::{Array2, Array4};
use num_complex::Complex64 as C64;

pub const MAGIC: &[u8; 4] = b"KVHB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 80;

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad snapshot: {0}")]
    Format(String),
    #[error("state rebuild failed: {0}")]
    Model(#[from] kvhsim::SimError),
}

fn kind_of(state: &ModelState) -> u32 {
    match state {
        ModelState::Kvh(_) => 0,
        ModelState::Wave(_) => 1,
        ModelState::Closure(_) => 2,
        ModelState::MeanField(_) => 3,
        ModelState::Spin(_) => 4,
    }
}

struct Meta {
    nq: usize,
    np: usize,
    n_levels: usize,
    kind: u32,
    extents: (f64, f64, f64, f64),
    hbar: f64,
    t: f64,
    d_floor: f64,
}

fn meta_of(state: &ModelState, t: f64) -> Meta {
    let (grid, n_levels, hbar, d_floor) = match state {
        ModelState::Kvh(s) => (s.psi.grid(), 1, s.hbar, 0.0),
        ModelState::Wave(s) => (s.grid(), s.n(), s.hbar, 0.0),
        ModelState::Closure(s) => (s.grid(), s.n(), s.hbar, s.d_floor),
        ModelState::MeanField(s) => (s.d.grid(), s.rho_q.nrows(), s.hbar, 0.0),
        ModelState::Spin(s) => (s.grid(), 2, s.hbar, s.d_floor),
    };
    Meta {
        nq: grid.nq(),
        np: grid.np(),
        n_levels,
        kind: kind_of(state),
        extents: grid.extents(),
        hbar,
        t,
        d_floor,
    }
}

fn write_f64s(w: &mut impl Write, vals: impl IntoIterator<Item = f64>) -> io::Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn complex_iter<'a>(vals: impl IntoIterator<Item = &'a C64> + 'a) -> impl Iterator<Item = f64> + 'a {
    vals.into_iter().flat_map(|z| [z.re, z.im])
}

pub fn write_snapshot(path: &Path, state: &ModelState, t: f64) -> Result<(), SnapshotError> {
    let meta = meta_of(state, t);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.nq as u32).to_le_bytes())?;
    w.write_all(&(meta.np as u32).to_le_bytes())?;
    w.write_all(&(meta.n_levels as u32).to_le_bytes())?;
    w.write_all(&meta.kind.to_le_bytes())?;
    let (a, b, c, d) = meta.extents;
    write_f64s(&mut w, [a, b, c, d, meta.hbar, meta.t, meta.d_floor])?;
    match state {
        ModelState::Kvh(s) => write_f64s(&mut w, complex_iter(s.psi.values.iter()))?,
        ModelState::Wave(s) => {
            for comp in &s.comps {
                write_f64s(&mut w, complex_iter(comp.values.iter()))?;
            }
        }
        ModelState::Closure(s) => write_f64s(&mut w, complex_iter(s.p.values.iter()))?,
        ModelState::MeanField(s) => {
            write_f64s(&mut w, s.d.values.iter().copied())?;
            write_f64s(&mut w, complex_iter(s.rho_q.iter()))?;
        }
        ModelState::Spin(s) => {
            write_f64s(&mut w, s.d.values.iter().copied())?;
            for c in &s.s {
                write_f64s(&mut w, c.values.iter().copied())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        if self.pos + n > self.buf.len() {
            return Err(SnapshotError::Format(format!(
                "truncated: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, SnapshotError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, SnapshotError> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn complexes(&mut self, n: usize) -> Result<Vec<C64>, SnapshotError> {
        let raw = self.f64s(2 * n)?;
        Ok(raw.chunks_exact(2).map(|c| C64::new(c[0], c[1])).collect())
    }
}

fn real_field(
    grid: &std::sync::Arc<PhaseSpaceGrid>,
    vals: Vec<f64>,
) -> Result<ScalarField, SnapshotError> {
    let arr = Array2::from_shape_vec((grid.nq(), grid.np()), vals)
        .map_err(|e| SnapshotError::Format(e.to_string()))?;
    Ok(ScalarField::from_values(grid.clone(), arr)?)
}

fn complex_field(
    grid: &std::sync::Arc<PhaseSpaceGrid>,
    vals: Vec<C64>,
) -> Result<ComplexField, SnapshotError> {
    let arr = Array2::from_shape_vec((grid.nq(), grid.np()), vals)
        .map_err(|e| SnapshotError::Format(e.to_string()))?;
    Ok(ComplexField::from_values(grid.clone(), arr)?)
}

/// Read a snapshot back into a state and its timestamp.
pub fn read_snapshot(path: &Path) -> Result<(ModelState, f64), SnapshotError> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(SnapshotError::Format("magic bytes are not KVHB".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(SnapshotError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let nq = cur.u32()? as usize;
    let np = cur.u32()? as usize;
    let n_levels = cur.u32()? as usize;
    let kind = cur.u32()?;
    let (q_min, q_max, p_min, p_max) = (cur.f64()?, cur.f64()?, cur.f64()?, cur.f64()?);
    let hbar = cur.f64()?;
    let t = cur.f64()?;
    let d_floor = cur.f64()?;
    debug_assert_eq!(cur.pos, HEADER_LEN);
    let grid = PhaseSpaceGrid::new(nq, np, q_min, q_max, p_min, p_max)?;
    let cells = nq * np;

    let state = match kind {
        0 => {
            let psi = complex_field(&grid, cur.complexes(cells)?)?;
            ModelState::Kvh(KoopmanWavefunction::new(psi, hbar))
        }
        1 => {
            let mut comps = Vec::with_capacity(n_levels);
            for _ in 0..n_levels {
                comps.push(complex_field(&grid, cur.complexes(cells)?)?);
            }
            ModelState::Wave(HybridWavefunction::new(comps, hbar))
        }
        2 => {
            let vals = cur.complexes(cells * n_levels * n_levels)?;
            let arr = Array4::from_shape_vec((nq, np, n_levels, n_levels), vals)
                .map_err(|e| SnapshotError::Format(e.to_string()))?;
            let mut p = MatrixField::zeros(grid, n_levels);
            p.values = arr;
            // Accept the state as stored, including rounding-level hermitian
            // deviation accumulated during the run.
            ModelState::Closure(ClosureState { p, hbar, d_floor })
        }
        3 => {
            let d = real_field(&grid, cur.f64s(cells)?)?;
            let rho_vals = cur.complexes(n_levels * n_levels)?;
            let rho = Array2::from_shape_vec((n_levels, n_levels), rho_vals)
                .map_err(|e| SnapshotError::Format(e.to_string()))?;
            ModelState::MeanField(MeanFieldState::new(d, rho, hbar)?)
        }
        4 => {
            let d = real_field(&grid, cur.f64s(cells)?)?;
            let s = [
                real_field(&grid, cur.f64s(cells)?)?,
                real_field(&grid, cur.f64s(cells)?)?,
                real_field(&grid, cur.f64s(cells)?)?,
            ];
            ModelState::Spin(kvhsim::spin::SpinState { d, s, hbar, d_floor })
        }
        other => return Err(SnapshotError::Format(format!("unknown payload kind {other}"))),
    };
    if cur.pos != buf.len() {
        return Err(SnapshotError::Format(format!(
            "{} trailing bytes after payload",
            buf.len() - cur.pos
        )));
    }
    Ok((state, t))
}
