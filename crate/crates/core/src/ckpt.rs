//! Little-endian binary container shared by every checkpoint file:
//! 4-byte magic, `u16` version, a format-specific body built from `u32`,
//! `f64`, string and named-blob fields, and a trailing CRC32 of everything
//! before it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub struct CheckpointWriter {
    buf: Vec<u8>,
}

impl CheckpointWriter {
    pub fn new(magic: &[u8; 4], version: u16) -> Self {
        let mut buf = magic.to_vec();
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    /// Named tensor: name, rank, dims, then `f32` values.
    pub fn blob(&mut self, name: &str, t: &Tensor) -> &mut Self {
        self.str(name);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

/// CRC32 trailer of a finished checkpoint image.
pub fn trailer_crc(bytes: &[u8]) -> u32 {
    let n = bytes.len();
    u32::from_le_bytes(bytes[n - 4..].try_into().expect("4 bytes"))
}

pub struct CheckpointReader<'a> {
    body: &'a [u8],
    pos: usize,
    path: &'a Path,
    pub version: u16,
}

impl<'a> CheckpointReader<'a> {
    /// Validates the CRC trailer before anything else is parsed, then the
    /// magic.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4], path: &'a Path) -> Result<Self> {
        if bytes.len() < 10 {
            return Err(Error::Format {
                path: path.into(),
                reason: "file too short".into(),
            });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checksum {
                what: path.display().to_string(),
                expected: stored,
                found: actual,
            });
        }
        if &body[..4] != magic {
            return Err(Error::Format {
                path: path.into(),
                reason: format!(
                    "bad magic, expected {:?}",
                    std::str::from_utf8(magic).unwrap_or("?")
                ),
            });
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        Ok(Self {
            body,
            pos: 6,
            path,
            version,
        })
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.into(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.body.len() {
            return Err(self.err("unexpected end of data"));
        }
        let s = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("invalid utf-8 string"))
    }

    pub fn blob(&mut self, expected: &str) -> Result<Tensor> {
        let name = self.string()?;
        if name != expected {
            return Err(self.err(format!("expected blob {expected:?}, found {name:?}")));
        }
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        Tensor::new(shape, data).map_err(|e| self.err(e.to_string()))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.body.len() {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_byte_fails_crc() {
        let mut w = CheckpointWriter::new(b"TEST", 1);
        w.u32(7).blob("x", &Tensor::vector(vec![1.0, 2.0]));
        let mut bytes = w.finish();
        let path = Path::new("mem");
        {
            let mut r = CheckpointReader::open(&bytes, b"TEST", path).unwrap();
            assert_eq!(r.u32().unwrap(), 7);
            assert_eq!(r.blob("x").unwrap().data(), &[1.0, 2.0]);
            r.finish().unwrap();
        }
        bytes[8] ^= 0x10;
        assert!(matches!(
            CheckpointReader::open(&bytes, b"TEST", path),
            Err(Error::Checksum { .. })
        ));
    }
}
