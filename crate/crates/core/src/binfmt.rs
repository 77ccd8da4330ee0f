//! Flat little-endian binary container shared by weight, kernel and
//! response files: a 4-byte magic, two little-endian `u16` dimensions, then
//! `f64` values until end of file.

use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub magic: [u8; 4],
    pub a: u16,
    pub b: u16,
    pub payload: Vec<f64>,
}

pub fn write_blob<W: Write>(mut w: W, blob: &Blob) -> Result<()> {
    w.write_all(&blob.magic)?;
    w.write_all(&blob.a.to_le_bytes())?;
    w.write_all(&blob.b.to_le_bytes())?;
    for v in &blob.payload {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_blob<R: Read>(mut r: R, magic: [u8; 4]) -> Result<Blob> {
    let mut header = [0u8; 8];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if header[..4] != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(&header[..4])
        )));
    }
    let a = u16::from_le_bytes([header[4], header[5]]);
    let b = u16::from_le_bytes([header[6], header[7]]);
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "payload length {} is not a multiple of 8",
            rest.len()
        )));
    }
    let payload = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Blob {
        magic,
        a,
        b,
        payload,
    })
}
