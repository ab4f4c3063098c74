//! Field snapshot format shared by the whole repository.
//!
//! Little-endian binary: 8-byte magic "PFLOW01\0", u32 kind, u32 nx, u32 ny,
//! f64 lx, f64 ly, f64 time, then the row-major f64 payload. The payload
//! length is implied by the kind: scalars are nx*ny, vector-x (nx+1)*ny,
//! vector-y nx*(ny+1), flow-map and displacement-gradient components nx*ny.

use crate::grid::{Grid, ScalarField, VectorField};
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"PFLOW01\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum FieldKind {
    Scalar = 0,
    VectorX = 1,
    VectorY = 2,
    FlowPosX = 3,
    FlowPosY = 4,
    DispGrad11 = 5,
    DispGrad12 = 6,
    DispGrad21 = 7,
    DispGrad22 = 8,
}

impl FieldKind {
    pub fn from_u32(v: u32) -> Option<Self> {
        Some(match v {
            0 => Self::Scalar,
            1 => Self::VectorX,
            2 => Self::VectorY,
            3 => Self::FlowPosX,
            4 => Self::FlowPosY,
            5 => Self::DispGrad11,
            6 => Self::DispGrad12,
            7 => Self::DispGrad21,
            8 => Self::DispGrad22,
            _ => return None,
        })
    }

    pub fn payload_len(&self, nx: usize, ny: usize) -> usize {
        match self {
            Self::VectorX => (nx + 1) * ny,
            Self::VectorY => nx * (ny + 1),
            _ => nx * ny,
        }
    }
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes (not a PFLOW01 snapshot)")]
    BadMagic,
    #[error("unknown field kind {0}")]
    UnknownKind(u32),
    #[error("payload length mismatch: expected {expected}, found {found}")]
    PayloadMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

/// A decoded snapshot.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub kind: FieldKind,
    pub grid: Grid,
    pub time: f64,
    pub data: Vec<f64>,
}

pub fn write_snapshot(
    mut w: impl Write,
    kind: FieldKind,
    grid: Grid,
    time: f64,
    data: &[f64],
) -> Result<(), SnapshotError> {
    let expected = kind.payload_len(grid.nx, grid.ny);
    if data.len() != expected {
        return Err(SnapshotError::PayloadMismatch { expected, found: data.len() });
    }
    w.write_all(MAGIC)?;
    w.write_all(&(kind as u32).to_le_bytes())?;
    w.write_all(&(grid.nx as u32).to_le_bytes())?;
    w.write_all(&(grid.ny as u32).to_le_bytes())?;
    w.write_all(&grid.lx.to_le_bytes())?;
    w.write_all(&grid.ly.to_le_bytes())?;
    w.write_all(&time.to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot(mut r: impl Read) -> Result<Snapshot, SnapshotError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    let mut f64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    let kind_raw = u32::from_le_bytes(u32buf);
    let kind = FieldKind::from_u32(kind_raw).ok_or(SnapshotError::UnknownKind(kind_raw))?;
    r.read_exact(&mut u32buf)?;
    let nx = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let ny = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut f64buf)?;
    let lx = f64::from_le_bytes(f64buf);
    r.read_exact(&mut f64buf)?;
    let ly = f64::from_le_bytes(f64buf);
    r.read_exact(&mut f64buf)?;
    let time = f64::from_le_bytes(f64buf);
    let grid = Grid::new(nx, ny, lx, ly)?;
    let n = kind.payload_len(nx, ny);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut f64buf)?;
        data.push(f64::from_le_bytes(f64buf));
    }
    // must be at EOF-consistent length; extra bytes are tolerated by readers
    Ok(Snapshot { kind, grid, time, data })
}

pub fn write_scalar_snapshot(
    path: &Path,
    field: &ScalarField,
    time: f64,
) -> Result<(), SnapshotError> {
    let f = std::fs::File::create(path)?;
    write_snapshot(io::BufWriter::new(f), FieldKind::Scalar, field.grid, time, &field.data)
}

/// Writes the two staggered components as `<stem>.ux.pflow` / `<stem>.uy.pflow`.
pub fn write_vector_snapshot(
    stem: &Path,
    field: &VectorField,
    time: f64,
) -> Result<(), SnapshotError> {
    let mut px = stem.as_os_str().to_owned();
    px.push(".ux.pflow");
    let mut py = stem.as_os_str().to_owned();
    py.push(".uy.pflow");
    let fx = std::fs::File::create(Path::new(&px))?;
    write_snapshot(io::BufWriter::new(fx), FieldKind::VectorX, field.grid, time, &field.u)?;
    let fy = std::fs::File::create(Path::new(&py))?;
    write_snapshot(io::BufWriter::new(fy), FieldKind::VectorY, field.grid, time, &field.v)
}

/// Plain-text CSV dump of a cell-centered field, for debugging.
pub fn write_scalar_csv(path: &Path, field: &ScalarField) -> Result<(), SnapshotError> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# nx={} ny={} lx={:.16e} ly={:.16e}", field.grid.nx, field.grid.ny, field.grid.lx, field.grid.ly)?;
    for j in 0..field.grid.ny {
        let row: Vec<String> = (0..field.grid.nx).map(|i| format!("{:.16e}", field.get(i, j))).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trip() {
        let grid = Grid::new(8, 12, 1.0, 1.5).unwrap();
        let field = ScalarField::from_fn(grid, |x, y| x * y + 0.25);
        let mut buf = Vec::new();
        write_snapshot(&mut buf, FieldKind::Scalar, grid, 2.5, &field.data).unwrap();
        let snap = read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(snap.kind, FieldKind::Scalar);
        assert_eq!(snap.grid, grid);
        assert_eq!(snap.time, 2.5);
        assert_eq!(snap.data, field.data);
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = vec![0u8; 64];
        assert!(matches!(read_snapshot(buf.as_slice()), Err(SnapshotError::BadMagic)));
    }

    #[test]
    fn vector_payload_lengths() {
        assert_eq!(FieldKind::VectorX.payload_len(8, 10), 90);
        assert_eq!(FieldKind::VectorY.payload_len(8, 10), 88);
        assert_eq!(FieldKind::Scalar.payload_len(8, 10), 80);
    }
}
