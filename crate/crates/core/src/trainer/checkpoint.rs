//! Binary checkpoint format, magic "MQFC": format version, config snapshot,
//! named little-endian f64 parameter arrays, optimizer moments, step counter
//! and rng state. Save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::params::ParamStore;

use super::{AdamState, TrainError};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MQFC";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub params: ParamStore,
    pub adam: AdamState,
    pub step: u64,
    pub rng_state: [u8; 32],
}

fn write_array(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<(), TrainError> {
    r.read_exact(buf).map_err(|_| TrainError::Corrupt("unexpected end of file".into()))
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32, TrainError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64, TrainError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut Cursor<&[u8]>, len: usize) -> Result<String, TrainError> {
    if len > 1 << 24 {
        return Err(TrainError::Corrupt(format!("string length {len} out of range")));
    }
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| TrainError::Corrupt("invalid utf-8".into()))
}

fn read_array(r: &mut Cursor<&[u8]>) -> Result<(String, Vec<usize>, Vec<f64>), TrainError> {
    let name_len = read_u32(r)? as usize;
    let name = read_string(r, name_len)?;
    let mut ndim = [0u8; 1];
    read_exact(r, &mut ndim)?;
    let mut shape = Vec::with_capacity(ndim[0] as usize);
    for _ in 0..ndim[0] {
        shape.push(read_u64(r)? as usize);
    }
    let n: usize = shape.iter().product();
    if n > 1 << 28 {
        return Err(TrainError::Corrupt(format!("array {name} too large ({n} elements)")));
    }
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        read_exact(r, &mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok((name, shape, data))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ckpt.version.to_le_bytes());
    out.extend_from_slice(&(ckpt.config_text.len() as u64).to_le_bytes());
    out.extend_from_slice(ckpt.config_text.as_bytes());

    out.extend_from_slice(&(ckpt.params.n_entries() as u64).to_le_bytes());
    for e in ckpt.params.iter() {
        write_array(&mut out, &e.name, &e.shape, &e.data);
    }
    for moments in [&ckpt.adam.m, &ckpt.adam.v] {
        out.extend_from_slice(&(moments.len() as u64).to_le_bytes());
        for (name, data) in moments {
            write_array(&mut out, name, &[data.len()], data);
        }
    }
    out.extend_from_slice(&ckpt.adam.t.to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    out.extend_from_slice(&ckpt.rng_state);

    let mut f = fs::File::create(path)
        .map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
    f.write_all(&out).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = fs::read(path).map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
    let mut r = Cursor::new(bytes.as_slice());

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(TrainError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(TrainError::BadVersion(version));
    }
    let config_len = read_u64(&mut r)? as usize;
    let config_text = read_string(&mut r, config_len)?;

    let n_params = read_u64(&mut r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let (name, shape, data) = read_array(&mut r)?;
        params.insert(&name, &shape, data);
    }
    let mut moments: [BTreeMap<String, Vec<f64>>; 2] = [BTreeMap::new(), BTreeMap::new()];
    for m in &mut moments {
        let n = read_u64(&mut r)? as usize;
        for _ in 0..n {
            let (name, _, data) = read_array(&mut r)?;
            m.insert(name, data);
        }
    }
    let [m, v] = moments;
    let t = read_u64(&mut r)?;
    let step = read_u64(&mut r)?;
    let mut rng_state = [0u8; 32];
    read_exact(&mut r, &mut rng_state)?;
    if r.position() != r.get_ref().len() as u64 {
        return Err(TrainError::Corrupt("trailing bytes after checkpoint".into()));
    }

    Ok(Checkpoint { version, config_text, params, adam: AdamState { m, v, t }, step, rng_state })
}
