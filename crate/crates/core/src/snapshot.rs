//! Binary field snapshots.
//!
//! Layout: magic `DNSL`, format version (u32 LE), truncation N (u32 LE), field
//! kind (u8), then the coefficients as f64 LE in lattice enumeration order
//! (one array for vorticity, `u1` followed by `u2` for velocity).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{VelocityField, VorticityField};

pub const MAGIC: &[u8; 4] = b"DNSL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FieldKind {
    Vorticity = 0,
    Velocity = 1,
    Tangent = 2,
}

impl FieldKind {
    fn from_u8(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Self::Vorticity),
            1 => Ok(Self::Velocity),
            2 => Ok(Self::Tangent),
            _ => Err(Error::Format(format!("unknown field kind {b}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Snapshot {
    Vorticity(VorticityField),
    Velocity(VelocityField),
    Tangent(VorticityField),
}

fn header(buf: &mut Vec<u8>, n: u32, kind: FieldKind) {
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    buf.push(kind as u8);
}

fn push_f64s(buf: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(s: &Snapshot) -> Vec<u8> {
    let mut buf = Vec::new();
    match s {
        Snapshot::Vorticity(w) | Snapshot::Tangent(w) => {
            let kind = if matches!(s, Snapshot::Vorticity(_)) {
                FieldKind::Vorticity
            } else {
                FieldKind::Tangent
            };
            header(&mut buf, w.truncation(), kind);
            push_f64s(&mut buf, w.coefficients());
        }
        Snapshot::Velocity(u) => {
            header(&mut buf, u.truncation(), FieldKind::Velocity);
            push_f64s(&mut buf, u.u1());
            push_f64s(&mut buf, u.u2());
        }
    }
    buf
}

pub fn decode(bytes: &[u8]) -> Result<Snapshot> {
    if bytes.len() < 13 {
        return Err(Error::Format("truncated header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if n == 0 || n > 4096 {
        return Err(Error::Format(format!("implausible truncation {n}")));
    }
    let kind = FieldKind::from_u8(bytes[12])?;
    let body = &bytes[13..];
    if body.len() % 8 != 0 {
        return Err(Error::Format("payload is not a whole number of f64 values".into()));
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let side = 2 * n as usize + 1;
    let dim = side * side - 1;
    let bad = |e: Error| Error::Format(e.to_string());
    match kind {
        FieldKind::Vorticity | FieldKind::Tangent => {
            if vals.len() != dim {
                return Err(Error::Format(format!("expected {dim} coefficients, found {}", vals.len())));
            }
            let w = VorticityField::from_coefficients(n, vals).map_err(bad)?;
            Ok(if kind == FieldKind::Vorticity {
                Snapshot::Vorticity(w)
            } else {
                Snapshot::Tangent(w)
            })
        }
        FieldKind::Velocity => {
            if vals.len() != 2 * dim {
                return Err(Error::Format(format!("expected {} coefficients, found {}", 2 * dim, vals.len())));
            }
            let (a, b) = vals.split_at(dim);
            Ok(Snapshot::Velocity(
                VelocityField::from_components(n, a.to_vec(), b.to_vec()).map_err(bad)?,
            ))
        }
    }
}

pub fn write(path: &Path, s: &Snapshot) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(s)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Snapshot> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
