//! Little-endian helpers for the self-describing binary formats.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::config::SystemConfig;
use crate::error::{Error, Result};

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn complex(&mut self, z: Complex64) -> Result<()> {
        self.f64(z.re)?;
        self.f64(z.im)
    }

    pub fn string(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }

    pub fn config(&mut self, cfg: &SystemConfig) -> Result<()> {
        self.string(&cfg.to_kv_string())
    }

    /// Shape then entries in row-major order.
    pub fn matrix(&mut self, m: &DMatrix<Complex64>) -> Result<()> {
        self.u32(m.nrows() as u32)?;
        self.u32(m.ncols() as u32)?;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.complex(m[(i, j)])?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub(crate) struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("unexpected end of file".into()),
            _ => Error::Io(e),
        })
    }

    pub fn magic(&mut self, expect: &[u8; 8]) -> Result<()> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        if &b != expect {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&b),
                String::from_utf8_lossy(expect)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b)?;
        Ok(b[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn complex(&mut self) -> Result<Complex64> {
        Ok(Complex64::new(self.f64()?, self.f64()?))
    }

    pub fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(Error::Format(format!("string length {len} is implausible")));
        }
        let mut b = vec![0u8; len];
        self.exact(&mut b)?;
        String::from_utf8(b).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    pub fn config(&mut self) -> Result<SystemConfig> {
        SystemConfig::from_kv_str(&self.string()?)
    }

    pub fn matrix(&mut self) -> Result<DMatrix<Complex64>> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        if rows.saturating_mul(cols) > 1 << 28 {
            return Err(Error::Format(format!("matrix {rows}x{cols} is implausible")));
        }
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.complex()?;
            }
        }
        Ok(m)
    }

    /// Errors unless the stream is exhausted.
    pub fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after payload".into())),
        }
    }
}

pub(crate) fn check_config(expected: &SystemConfig, found: &SystemConfig) -> Result<()> {
    if expected.physical_hash() != found.physical_hash() {
        return Err(Error::ConfigMismatch {
            expected: expected.physical_hash(),
            found: found.physical_hash(),
        });
    }
    Ok(())
}
