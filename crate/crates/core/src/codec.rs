//! Little-endian binary containers.
//!
//! A matrix is `"NSUM" | rows: u32 | cols: u32 | rows*cols f64`. Larger files
//! are containers: a 4-byte magic, a `u32` version, then sections, each
//! prefixed by its `u64` byte length.

use std::io::{Cursor, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::linalg::Matrix;

pub const MATRIX_MAGIC: [u8; 4] = *b"NSUM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("non-finite value in matrix payload")]
    NonFinite,
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CodecError>;

pub fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    w.write_all(&MATRIX_MAGIC)?;
    w.write_u32::<LittleEndian>(to_u32(m.rows())?)?;
    w.write_u32::<LittleEndian>(to_u32(m.cols())?)?;
    for v in m.data() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<Matrix> {
    expect_magic(r, MATRIX_MAGIC)?;
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| CodecError::Malformed("matrix size overflow".into()))?;
    let mut data = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let v = r.read_f64::<LittleEndian>()?;
        if !v.is_finite() {
            return Err(CodecError::NonFinite);
        }
        data.push(v);
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 8 * m.len());
    write_matrix(&mut buf, m).expect("writing to a Vec cannot fail");
    buf
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let mut cur = Cursor::new(bytes);
    let m = read_matrix(&mut cur)?;
    if cur.position() as usize != bytes.len() {
        return Err(CodecError::Malformed("trailing bytes after matrix".into()));
    }
    Ok(m)
}

pub fn expect_magic<R: Read>(r: &mut R, magic: [u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)?;
    if found != magic {
        return Err(CodecError::BadMagic {
            expected: String::from_utf8_lossy(&magic).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    Ok(())
}

pub fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| CodecError::Malformed(format!("{n} does not fit in u32")))
}

/// Builds a sectioned container in memory.
pub struct ContainerWriter {
    buf: Vec<u8>,
}

impl ContainerWriter {
    pub fn new(magic: [u8; 4]) -> Self {
        let mut buf = magic.to_vec();
        buf.write_u32::<LittleEndian>(FORMAT_VERSION)
            .expect("writing to a Vec cannot fail");
        Self { buf }
    }

    pub fn section(&mut self, payload: &[u8]) {
        self.buf
            .write_u64::<LittleEndian>(payload.len() as u64)
            .expect("writing to a Vec cannot fail");
        self.buf.extend_from_slice(payload);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Splits a container produced by [`ContainerWriter`] into its sections.
pub fn read_container(bytes: &[u8], magic: [u8; 4]) -> Result<Vec<&[u8]>> {
    let mut cur = Cursor::new(bytes);
    expect_magic(&mut cur, magic)?;
    let version = cur.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(CodecError::UnsupportedVersion(version));
    }
    let mut sections = Vec::new();
    let mut pos = cur.position() as usize;
    while pos < bytes.len() {
        let mut len_cur = Cursor::new(&bytes[pos..]);
        let len = len_cur.read_u64::<LittleEndian>()? as usize;
        let start = pos + 8;
        let end = start
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| CodecError::Malformed("section overruns container".into()))?;
        sections.push(&bytes[start..end]);
        pos = end;
    }
    Ok(sections)
}

/// Small helpers for section payloads.
pub trait WriteExt: Write {
    fn put_u32(&mut self, v: u32) -> Result<()> {
        Ok(self.write_u32::<LittleEndian>(v)?)
    }

    fn put_usize(&mut self, v: usize) -> Result<()> {
        self.put_u32(to_u32(v)?)
    }

    fn put_u64(&mut self, v: u64) -> Result<()> {
        Ok(self.write_u64::<LittleEndian>(v)?)
    }

    fn put_str(&mut self, s: &str) -> Result<()> {
        self.put_usize(s.len())?;
        Ok(self.write_all(s.as_bytes())?)
    }
}

impl<W: Write + ?Sized> WriteExt for W {}

pub trait ReadExt: Read {
    fn get_u32(&mut self) -> Result<u32> {
        Ok(self.read_u32::<LittleEndian>()?)
    }

    fn get_usize(&mut self) -> Result<usize> {
        Ok(self.get_u32()? as usize)
    }

    fn get_u64(&mut self) -> Result<u64> {
        Ok(self.read_u64::<LittleEndian>()?)
    }

    fn get_u8(&mut self) -> Result<u8> {
        Ok(self.read_u8()?)
    }

    fn get_str(&mut self) -> Result<String> {
        let n = self.get_usize()?;
        let mut buf = vec![0u8; n];
        self.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| CodecError::Malformed(e.to_string()))
    }
}

impl<R: Read + ?Sized> ReadExt for R {}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matrix_layout_is_little_endian() {
        let m = Matrix::from_rows(&[vec![1.0, -2.5]]);
        let bytes = encode_matrix(&m);
        assert_eq!(&bytes[..4], b"NSUM");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[20..28], &(-2.5f64).to_le_bytes());
    }

    #[test]
    fn rejects_wrong_magic_and_nan() {
        let mut bytes = encode_matrix(&Matrix::zeros(1, 1));
        bytes[0] = b'X';
        assert!(matches!(decode_matrix(&bytes), Err(CodecError::BadMagic { .. })));
        let bytes = encode_matrix(&Matrix::filled(1, 1, f64::NAN));
        assert!(matches!(decode_matrix(&bytes), Err(CodecError::NonFinite)));
    }

    #[test]
    fn container_sections_round_trip() {
        let mut w = ContainerWriter::new(*b"TEST");
        w.section(b"abc");
        w.section(b"");
        w.section(&[7; 10]);
        let bytes = w.finish();
        let sections = read_container(&bytes, *b"TEST").unwrap();
        assert_eq!(sections, vec![&b"abc"[..], &b""[..], &[7u8; 10][..]]);
        assert!(read_container(&bytes[..bytes.len() - 1], *b"TEST").is_err());
    }

    proptest! {
        #[test]
        fn matrix_round_trips(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 - 500.0) / 7.0)
                .collect();
            let m = Matrix::from_vec(rows, cols, data);
            prop_assert_eq!(decode_matrix(&encode_matrix(&m)).unwrap(), m);
        }
    }
}
