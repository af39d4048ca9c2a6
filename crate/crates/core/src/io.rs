//! Little-endian binary helpers and the raw tensor dump formats.
//!
//! * Matrix dump: `rows: u32`, `cols: u32`, then `rows·cols` float32 values, row-major.
//! * Grid dump: `height: u32`, `width: u32`, then `height·width` float32 values.
//! * Masks: binary PGM (`P5`, maxval 255), 0 for background and 255 for claimed cells.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{BinaryGrid, FeatureMatrix, Grid2D};

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the full-precision values of `m` (shape, then f64 bits).
pub fn matrix_checksum(m: &FeatureMatrix) -> String {
    let mut w = ByteWriter::new();
    w.u32(m.rows() as u32);
    w.u32(m.cols() as u32);
    w.f64s(m.data());
    sha256_hex(&w.into_inner())
}

/// Cursor over a byte slice that reports the offset of every failure.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != expect {
            return Err(Error::format(
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expect)
                ),
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::format(self.pos, format!("{what}: element count overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos, format!("{what}: element count overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::format(at, format!("{what} is not valid UTF-8")))
    }

    pub fn finish(&self, what: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                self.pos,
                format!("{} trailing bytes after {what}", self.remaining()),
            ));
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub fn encode_matrix_f32(m: &FeatureMatrix) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u32(m.rows() as u32);
    w.u32(m.cols() as u32);
    for &v in m.data() {
        w.f32(v as f32);
    }
    w.into_inner()
}

pub fn decode_matrix_f32(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut r = ByteReader::new(bytes);
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let vals = r.f32s(rows * cols, "matrix values")?;
    r.finish("matrix dump")?;
    if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(8 + 4 * i, "non-finite value in matrix dump"));
    }
    FeatureMatrix::from_vec(rows, cols, vals.into_iter().map(f64::from).collect())
}

pub fn write_matrix_f32(path: &Path, m: &FeatureMatrix) -> Result<()> {
    std::fs::write(path, encode_matrix_f32(m))?;
    Ok(())
}

pub fn read_matrix_f32(path: &Path) -> Result<FeatureMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_matrix_f32(&bytes)
}

pub fn encode_grid_f32(g: &Grid2D) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u32(g.height() as u32);
    w.u32(g.width() as u32);
    for &v in g.data() {
        w.f32(v as f32);
    }
    w.into_inner()
}

pub fn decode_grid_f32(bytes: &[u8]) -> Result<Grid2D> {
    let mut r = ByteReader::new(bytes);
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let vals = r.f32s(h * w, "grid values")?;
    r.finish("grid dump")?;
    Grid2D::from_vec(h, w, vals.into_iter().map(f64::from).collect())
}

pub fn encode_pgm(mask: &BinaryGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&b| if b { 255u8 } else { 0u8 }));
    out
}

/// Parses a P5 mask written by [`encode_pgm`]; any nonzero byte is foreground.
pub fn decode_pgm(bytes: &[u8]) -> Result<BinaryGrid> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "truncated PGM header"));
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if fields[0].1 != "P5" {
        return Err(Error::format(0, "not a binary PGM (P5)"));
    }
    let num = |i: usize| -> Result<usize> {
        fields[i]
            .1
            .parse()
            .map_err(|_| Error::format(fields[i].0, "bad PGM header number"))
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::format(fields[3].0, "PGM maxval must be 255"));
    }
    pos += 1;
    let body = bytes
        .get(pos..)
        .filter(|b| b.len() == w * h)
        .ok_or_else(|| Error::format(pos, "PGM body length does not match header"))?;
    BinaryGrid::from_vec(h, w, body.iter().map(|&b| b != 0).collect())
}
