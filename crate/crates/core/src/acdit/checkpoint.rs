//! Parameter checkpoint: magic `ACDT`, u32 version, u32 d, u32 L, u32 K,
//! then named f64 arrays (u32 name length, name bytes, u32 ndim, ndim u32
//! dims, row-major f64 data), all little-endian.

use std::io::Read;
use std::path::Path;

use super::block::{AcDitParams, SlotMut, SlotRef};
use super::{AcDitConfig, AcditError};

const MAGIC: &[u8; 4] = b"ACDT";
const VERSION: u32 = 1;

fn slot_dims(slot: &SlotRef<'_>) -> Vec<u32> {
    match slot {
        SlotRef::Mat(m) => vec![m.nrows() as u32, m.ncols() as u32],
        SlotRef::Vec(v) => vec![v.len() as u32],
        SlotRef::Scalar(_) => vec![],
    }
}

pub fn params_to_bytes(params: &AcDitParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.config.d as u32).to_le_bytes());
    out.extend_from_slice(&(params.config.l as u32).to_le_bytes());
    out.extend_from_slice(&(params.config.k as u32).to_le_bytes());
    for (name, slot) in params.slots() {
        let bytes = name.as_bytes();
        out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(bytes);
        let dims = slot_dims(&slot);
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match slot {
            // nalgebra stores column-major; emit row-major for the file.
            SlotRef::Mat(m) => {
                for r in 0..m.nrows() {
                    for c in 0..m.ncols() {
                        out.extend_from_slice(&m[(r, c)].to_le_bytes());
                    }
                }
            }
            SlotRef::Vec(v) => {
                for x in v.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            SlotRef::Scalar(s) => out.extend_from_slice(&s.to_le_bytes()),
        }
    }
    out
}

pub fn save_params(path: &Path, params: &AcDitParams) -> Result<(), AcditError> {
    std::fs::write(path, params_to_bytes(params))?;
    Ok(())
}

fn read_u32(cur: &mut std::io::Cursor<&[u8]>) -> Result<u32, AcditError> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)
        .map_err(|_| AcditError::Checkpoint("truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(cur: &mut std::io::Cursor<&[u8]>) -> Result<f64, AcditError> {
    let mut b = [0u8; 8];
    cur.read_exact(&mut b)
        .map_err(|_| AcditError::Checkpoint("truncated".into()))?;
    Ok(f64::from_le_bytes(b))
}

pub fn params_from_bytes(bytes: &[u8], config: AcDitConfig) -> Result<AcDitParams, AcditError> {
    let mut cur = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| AcditError::Checkpoint("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(AcditError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut cur)?;
    if version != VERSION {
        return Err(AcditError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let (d, l, k) = (read_u32(&mut cur)?, read_u32(&mut cur)?, read_u32(&mut cur)?);
    if d as usize != config.d || l as usize != config.l || k as usize != config.k {
        return Err(AcditError::Checkpoint(format!(
            "checkpoint dims d={d} L={l} K={k} do not match config d={} L={} K={}",
            config.d, config.l, config.k
        )));
    }

    let mut params = AcDitParams::init(config, 0).zeros_like();
    for (expected_name, mut slot) in params.slots_mut() {
        let name_len = read_u32(&mut cur)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes)
            .map_err(|_| AcditError::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| AcditError::Checkpoint("name is not utf-8".into()))?;
        if name != expected_name {
            return Err(AcditError::Checkpoint(format!(
                "array {name:?} found where {expected_name:?} was expected"
            )));
        }
        let ndim = read_u32(&mut cur)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut cur)? as usize);
        }
        match &mut slot {
            SlotMut::Mat(m) => {
                if dims != [m.nrows(), m.ncols()] {
                    return Err(AcditError::Checkpoint(format!(
                        "{name}: dims {dims:?} != {}x{}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                for r in 0..m.nrows() {
                    for c in 0..m.ncols() {
                        m[(r, c)] = read_f64(&mut cur)?;
                    }
                }
            }
            SlotMut::Vec(v) => {
                if dims != [v.len()] {
                    return Err(AcditError::Checkpoint(format!(
                        "{name}: dims {dims:?} != {}",
                        v.len()
                    )));
                }
                for i in 0..v.len() {
                    v[i] = read_f64(&mut cur)?;
                }
            }
            SlotMut::Scalar(s) => {
                if !dims.is_empty() {
                    return Err(AcditError::Checkpoint(format!(
                        "{name}: expected scalar, got dims {dims:?}"
                    )));
                }
                **s = read_f64(&mut cur)?;
            }
        }
    }
    let mut rest = Vec::new();
    cur.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(AcditError::Checkpoint(format!(
            "{} trailing bytes",
            rest.len()
        )));
    }
    Ok(params)
}

pub fn load_params(path: &Path, config: AcDitConfig) -> Result<AcDitParams, AcditError> {
    let bytes = std::fs::read(path)?;
    params_from_bytes(&bytes, config)
}
