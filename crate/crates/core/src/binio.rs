//! Little-endian binary helpers shared by the on-disk formats.
//!
//! Every container starts with 8 magic bytes and a `u32` version. Named
//! arrays are stored as
//! `name_len:u32 | name:utf8 | rank:u32 | dims:u32*rank | data:f32*prod(dims)`.

use std::io::{Read, Write};

use casam_tensor::Tensor;

use crate::error::{CoreError, Result};

pub type Magic = [u8; 8];

fn io_err(e: std::io::Error) -> CoreError {
    CoreError::Format(e.to_string())
}

pub fn write_header(w: &mut impl Write, magic: &Magic, version: u32) -> Result<()> {
    w.write_all(magic).map_err(io_err)?;
    write_u32(w, version)
}

/// Reads and checks magic bytes and version.
pub fn read_header(r: &mut impl Read, magic: &Magic, version: u32) -> Result<()> {
    let mut got = [0u8; 8];
    r.read_exact(&mut got).map_err(io_err)?;
    if &got != magic {
        return Err(CoreError::Format(format!(
            "bad magic bytes {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = read_u32(r)?;
    if v != version {
        return Err(CoreError::Format(format!("unsupported version {} (expected {})", v, version)));
    }
    Ok(())
}

pub fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

pub fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_i64(w: &mut impl Write, v: i64) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

pub fn read_i64(r: &mut impl Read) -> Result<i64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(i64::from_le_bytes(b))
}

pub fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

pub fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(f64::from_le_bytes(b))
}

pub fn write_f32s(w: &mut impl Write, data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err)
}

pub fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_arrays<'a>(w: &mut impl Write, arrays: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let arrays: Vec<_> = arrays.into_iter().collect();
    write_u32(w, arrays.len() as u32)?;
    for (name, t) in arrays {
        write_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        write_u32(w, t.rank() as u32)?;
        for &d in t.shape() {
            write_u32(w, d as u32)?;
        }
        write_f32s(w, t.data())?;
    }
    Ok(())
}

/// Guards allocations against corrupted length fields.
const MAX_ELEMENTS: usize = 1 << 28;

pub fn read_arrays(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(CoreError::Format(format!("array name length {} is implausible", len)));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|e| CoreError::Format(e.to_string()))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(CoreError::Format(format!("array {} has rank {}", name, rank)));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(r)? as usize);
        }
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = match n {
            Some(n) if n <= MAX_ELEMENTS => n,
            _ => return Err(CoreError::Format(format!("array {} has implausible dims {:?}", name, dims))),
        };
        let data = read_f32s(r, n)?;
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

/// Copies loaded arrays into parameters, matching by position and checking
/// names and shapes.
pub fn load_into(
    arrays: Vec<(String, Tensor)>,
    params: Vec<&mut casam_tensor::Parameter>,
) -> Result<()> {
    if arrays.len() != params.len() {
        return Err(CoreError::Format(format!(
            "expected {} arrays, found {}",
            params.len(),
            arrays.len()
        )));
    }
    for ((name, t), p) in arrays.into_iter().zip(params) {
        if name != p.name || t.shape() != p.value.shape() {
            return Err(CoreError::Format(format!(
                "array {} {:?} does not match parameter {} {:?}",
                name,
                t.shape(),
                p.name,
                p.value.shape()
            )));
        }
        p.value = t;
    }
    Ok(())
}
