//! Flat parameter container: magic `DMX1`, version, param count, then per
//! param the name, a dtype tag, rank, extents, the use-time scale as f64 and
//! the raw little-endian f32 payload. Round trips are bit-exact.

use std::io::{self, Read, Write};

use super::param::Param;

pub const CONTAINER_MAGIC: [u8; 4] = *b"DMX1";
const CONTAINER_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// One serialized parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub scale: f64,
    pub data: Vec<f32>,
}

impl ParamRecord {
    pub fn from_param(p: &Param<f32>) -> Self {
        ParamRecord {
            name: p.name().to_string(),
            shape: p.tensor().shape().to_vec(),
            scale: p.scale() as f64,
            data: p.tensor().to_vec(),
        }
    }
}

fn bad_data(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

/// Write records in order.
pub fn write_container<W: Write>(w: &mut W, records: &[ParamRecord]) -> io::Result<()> {
    w.write_all(&CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[DTYPE_F32])?;
        w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
        for &e in &r.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        w.write_all(&r.scale.to_le_bytes())?;
        let numel: usize = r.shape.iter().product();
        if numel != r.data.len() {
            return Err(bad_data(format!("record {} shape/data mismatch", r.name)));
        }
        for &v in &r.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_vec<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Read back what [`write_container`] wrote.
pub fn read_container<R: Read>(r: &mut R) -> io::Result<Vec<ParamRecord>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CONTAINER_MAGIC {
        return Err(bad_data("bad container magic"));
    }
    let version = read_u32(r)?;
    if version != CONTAINER_VERSION {
        return Err(bad_data(format!("unsupported container version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let name = String::from_utf8(read_exact_vec(r, name_len)?)
            .map_err(|_| bad_data("non-utf8 param name"))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F32 {
            return Err(bad_data(format!("unsupported dtype tag {}", dtype[0])));
        }
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let mut scale_b = [0u8; 8];
        r.read_exact(&mut scale_b)?;
        let scale = f64::from_le_bytes(scale_b);
        let numel: usize = shape.iter().product();
        let raw = read_exact_vec(r, numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(ParamRecord { name, shape, scale, data });
    }
    Ok(records)
}
