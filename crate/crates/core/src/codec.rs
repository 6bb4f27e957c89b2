//! Little-endian binary helpers for model files.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn write_u32<W: Write + ?Sized>(w: &mut W, v: u32) -> Result<()> {
    w.write_u32::<LittleEndian>(v)?;
    Ok(())
}

pub fn read_u32<R: Read + ?Sized>(r: &mut R) -> Result<u32> {
    Ok(r.read_u32::<LittleEndian>()?)
}

pub fn write_len<W: Write + ?Sized>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("length {v} too large")))?;
    write_u32(w, v)
}

pub fn read_len<R: Read + ?Sized>(r: &mut R) -> Result<usize> {
    Ok(read_u32(r)? as usize)
}

/// Scalars are always stored as `f64`, which is lossless for `f32` and `f64`.
pub fn write_reals<T: Real, W: Write + ?Sized>(w: &mut W, v: &[T]) -> Result<()> {
    write_len(w, v.len())?;
    for &x in v {
        w.write_f64::<LittleEndian>(x.as_f64())?;
    }
    Ok(())
}

pub fn read_reals<T: Real, R: Read + ?Sized>(r: &mut R) -> Result<Vec<T>> {
    let n = read_len(r)?;
    (0..n)
        .map(|_| Ok(T::lit(r.read_f64::<LittleEndian>()?)))
        .collect()
}

pub fn write_str<W: Write + ?Sized>(w: &mut W, s: &str) -> Result<()> {
    write_len(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_str<R: Read + ?Sized>(r: &mut R) -> Result<String> {
    let n = read_len(r)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

pub fn expect_magic<R: Read + ?Sized>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}
