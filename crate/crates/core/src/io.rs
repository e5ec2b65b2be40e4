//! Field snapshots in the flat `CHCF` binary format and CSV time series.
//!
//! Snapshot layout, all little-endian:
//! magic `CHCF`, version `u32`, dim `u32`, cells per axis `u32 × dim`,
//! lengths `f64 × dim`, field count `u32`, then each field's values in the
//! grid's row-major order (axis 0 slowest).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::adjoint::CostSpec;
use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::optimize::cumulative_cost;
use crate::state::{mass_ledger, ControlTrajectory, StateTriple, Trajectory};

pub const MAGIC: &[u8; 4] = b"CHCF";
pub const FORMAT_VERSION: u32 = 1;

/// Decoded snapshot: the grid and the raw field payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub grid: Arc<Grid>,
    pub fields: Vec<Field>,
}

pub fn encode_snapshot(grid: &Grid, fields: &[&Field]) -> Result<Vec<u8>> {
    for f in fields {
        if f.grid().as_ref() != grid {
            return Err(Error::Shape("snapshot fields must share one grid".into()));
        }
    }
    let mut out = Vec::with_capacity(32 + 8 * grid.len() * fields.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.dim() as u32).to_le_bytes());
    for &n in grid.n_per_axis() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for &l in grid.lengths() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for f in fields {
        for v in f.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let chunk = self.bytes.get(self.pos..self.pos + N)?;
        self.pos += N;
        chunk.try_into().ok()
    }

    fn u32(&mut self) -> Option<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn f64(&mut self) -> Option<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }
}

pub fn decode_snapshot(bytes: &[u8], path: &Path) -> Result<Snapshot> {
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut c = Cursor { bytes, pos: 0 };
    if c.take::<4>().as_ref() != Some(MAGIC) {
        return Err(bad("missing CHCF magic"));
    }
    let version = c.u32().ok_or_else(|| bad("truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let dim = c.u32().ok_or_else(|| bad("truncated header"))? as usize;
    if !(1..=3).contains(&dim) {
        return Err(bad(&format!("dimension {dim} out of range")));
    }
    let mut n = Vec::with_capacity(dim);
    for _ in 0..dim {
        n.push(c.u32().ok_or_else(|| bad("truncated header"))? as usize);
    }
    let mut lengths = Vec::with_capacity(dim);
    for _ in 0..dim {
        lengths.push(c.f64().ok_or_else(|| bad("truncated header"))?);
    }
    let count = c.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let grid = Arc::new(Grid::new(dim, &n, &lengths).map_err(|e| bad(&e.to_string()))?);
    let cells = grid.len();
    if bytes.len() - c.pos != 8 * cells * count {
        return Err(bad(&format!(
            "payload has {} bytes, header announces {count} fields of {cells} cells",
            bytes.len() - c.pos
        )));
    }
    let mut fields = Vec::with_capacity(count);
    for _ in 0..count {
        let values: Vec<f64> = (0..cells).map(|_| c.f64().expect("length checked")).collect();
        fields.push(Field::from_values(&grid, values).map_err(|e| bad(&e.to_string()))?);
    }
    Ok(Snapshot { grid, fields })
}

pub fn write_snapshot(path: impl AsRef<Path>, fields: &[&Field]) -> Result<()> {
    let path = path.as_ref();
    let grid = fields
        .first()
        .map(|f| Arc::clone(f.grid()))
        .ok_or_else(|| Error::Shape("snapshot needs at least one field".into()))?;
    let bytes = encode_snapshot(&grid, fields)?;
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Writes `(μ, φ, σ)` as a three-field snapshot.
pub fn write_triple(path: impl AsRef<Path>, s: &StateTriple) -> Result<()> {
    write_snapshot(path, &[&s.mu, &s.phi, &s.sigma])
}

pub fn read_snapshot(path: impl AsRef<Path>) -> Result<Snapshot> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_snapshot(&bytes, path)
}

/// Stores a control as one field per interval `1..=nt`.
pub fn write_control(path: impl AsRef<Path>, u: &ControlTrajectory) -> Result<()> {
    let fields: Vec<&Field> = (1..=u.nt()).map(|n| u.at(n)).collect();
    write_snapshot(path, &fields)
}

pub const TIMESERIES_COLUMNS: [&str; 13] = [
    "t",
    "J_total",
    "J_b1",
    "J_b2",
    "J_b3",
    "J_b4",
    "J_b5",
    "J_b6",
    "mass",
    "phi_min",
    "phi_max",
    "margin",
    "newton_iters",
];

/// One row per time node. Cost columns are cumulative up to `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeRecord {
    pub t: f64,
    pub j_total: f64,
    pub j_terms: [f64; 6],
    pub mass: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    pub margin: f64,
    pub newton_iters: usize,
}

pub fn time_records(traj: &Trajectory, u: &ControlTrajectory, cost: &CostSpec) -> Result<Vec<TimeRecord>> {
    let costs = cumulative_cost(traj, u, cost)?;
    let ledger = mass_ledger(traj, u);
    let pot = &traj.params.potential;
    Ok(traj
        .states
        .iter()
        .enumerate()
        .map(|(n, s)| {
            let (lo, hi) = (s.phi.min(), s.phi.max());
            let mut j_terms = [0.0; 6];
            j_terms.copy_from_slice(&costs[n].terms[1..]);
            TimeRecord {
                t: traj.params.time(n),
                j_total: costs[n].total(),
                j_terms,
                mass: ledger.masses[n],
                phi_min: lo,
                phi_max: hi,
                margin: pot.margin(lo).min(pot.margin(hi)),
                newton_iters: if n == 0 { 0 } else { traj.steps[n - 1].newton_iters },
            }
        })
        .collect())
}

pub fn timeseries_csv(records: &[TimeRecord]) -> String {
    let mut out = TIMESERIES_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let mut cols = vec![r.t, r.j_total];
        cols.extend_from_slice(&r.j_terms);
        cols.extend_from_slice(&[r.mass, r.phi_min, r.phi_max, r.margin]);
        let mut line: Vec<String> = cols.iter().map(|v| format!("{v:e}")).collect();
        line.push(r.newton_iters.to_string());
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_timeseries(records: &[TimeRecord], path: impl AsRef<Path>) -> Result<()> {
    write_text(path, &timeseries_csv(records))
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let grid = Arc::new(Grid::new(2, &[3, 2], &[1.0, 0.5]).unwrap());
        let f = Field::from_fn(&grid, |x| x[0] - x[1]);
        let bytes = encode_snapshot(&grid, &[&f]).unwrap();
        assert_eq!(&bytes[..4], b"CHCF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[28..36].try_into().unwrap()), 0.5);
        assert_eq!(u32::from_le_bytes(bytes[36..40].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 40 + 8 * 6);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let grid = Arc::new(Grid::line(4, 1.0).unwrap());
        let f = Field::constant(&grid, 2.0);
        let bytes = encode_snapshot(&grid, &[&f]).unwrap();
        let err = decode_snapshot(&bytes[..bytes.len() - 1], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let err = decode_snapshot(b"CHCX", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
