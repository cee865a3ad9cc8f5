//! Little-endian binary container primitives shared by checkpoints, cache
//! snapshots and corpus files.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported {what} version {found} (this build reads {expected})")]
    Version {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("corrupt data: {0}")]
    Corrupt(String),
}

/// Upper bound on any single length prefix, to fail fast on garbage input.
const MAX_LEN: u64 = 1 << 32;

pub struct BinWriter<W: Write> {
    inner: W,
}

impl<W: Write> BinWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn into_inner(self) -> W {
        self.inner
    }

    pub fn magic(&mut self, magic: &[u8; 8]) -> io::Result<()> {
        self.inner.write_all(magic)
    }

    pub fn u8(&mut self, v: u8) -> io::Result<()> {
        self.inner.write_u8(v)
    }

    pub fn u32(&mut self, v: u32) -> io::Result<()> {
        self.inner.write_u32::<LittleEndian>(v)
    }

    pub fn u64(&mut self, v: u64) -> io::Result<()> {
        self.inner.write_u64::<LittleEndian>(v)
    }

    pub fn u128(&mut self, v: u128) -> io::Result<()> {
        self.inner.write_u128::<LittleEndian>(v)
    }

    pub fn usize(&mut self, v: usize) -> io::Result<()> {
        self.u64(v as u64)
    }

    pub fn f64(&mut self, v: f64) -> io::Result<()> {
        self.inner.write_f64::<LittleEndian>(v)
    }

    pub fn bool(&mut self, v: bool) -> io::Result<()> {
        self.u8(v as u8)
    }

    pub fn bytes(&mut self, v: &[u8]) -> io::Result<()> {
        self.usize(v.len())?;
        self.inner.write_all(v)
    }

    pub fn str(&mut self, v: &str) -> io::Result<()> {
        self.bytes(v.as_bytes())
    }

    pub fn opt_f64(&mut self, v: Option<f64>) -> io::Result<()> {
        match v {
            Some(x) => {
                self.bool(true)?;
                self.f64(x)
            }
            None => self.bool(false),
        }
    }

    pub fn usizes(&mut self, v: &[usize]) -> io::Result<()> {
        self.usize(v.len())?;
        v.iter().try_for_each(|&x| self.usize(x))
    }

    /// Shape prefix (rows, cols) then row-major values.
    pub fn matrix(&mut self, m: &Array2<f64>) -> io::Result<()> {
        let (rows, cols) = m.dim();
        self.usize(rows)?;
        self.usize(cols)?;
        m.iter().try_for_each(|&x| self.f64(x))
    }

    pub fn named_matrix(&mut self, name: &str, m: &Array2<f64>) -> io::Result<()> {
        self.str(name)?;
        self.matrix(m)
    }
}

pub struct BinReader<R: Read> {
    inner: R,
}

impl<R: Read> BinReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<(), FormatError> {
        let mut found = [0u8; 8];
        self.inner.read_exact(&mut found)?;
        if &found != magic {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.inner.read_u8()?)
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(self.inner.read_u32::<LittleEndian>()?)
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(self.inner.read_u64::<LittleEndian>()?)
    }

    pub fn u128(&mut self) -> Result<u128, FormatError> {
        Ok(self.inner.read_u128::<LittleEndian>()?)
    }

    pub fn usize(&mut self) -> Result<usize, FormatError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| FormatError::Corrupt(format!("length {v} overflows usize")))
    }

    fn len(&mut self) -> Result<usize, FormatError> {
        let v = self.u64()?;
        if v > MAX_LEN {
            return Err(FormatError::Corrupt(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(self.inner.read_f64::<LittleEndian>()?)
    }

    pub fn bool(&mut self) -> Result<bool, FormatError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(FormatError::Corrupt(format!("bad bool byte {b}"))),
        }
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, FormatError> {
        let n = self.len()?;
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }

    pub fn str(&mut self) -> Result<String, FormatError> {
        String::from_utf8(self.bytes()?).map_err(|e| FormatError::Corrupt(e.to_string()))
    }

    pub fn opt_f64(&mut self) -> Result<Option<f64>, FormatError> {
        Ok(if self.bool()? { Some(self.f64()?) } else { None })
    }

    pub fn usizes(&mut self) -> Result<Vec<usize>, FormatError> {
        let n = self.len()?;
        (0..n).map(|_| self.usize()).collect()
    }

    pub fn matrix(&mut self) -> Result<Array2<f64>, FormatError> {
        let rows = self.len()?;
        let cols = self.len()?;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n as u64 <= MAX_LEN)
            .ok_or_else(|| FormatError::Corrupt(format!("matrix {rows}x{cols} too large")))?;
        let mut data = vec![0.0; n];
        self.inner.read_f64_into::<LittleEndian>(&mut data)?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches length"))
    }

    /// Reads a named matrix and checks its name.
    pub fn named_matrix(&mut self, expected: &str) -> Result<Array2<f64>, FormatError> {
        let name = self.str()?;
        if name != expected {
            return Err(FormatError::Corrupt(format!("expected tensor {expected:?}, found {name:?}")));
        }
        self.matrix()
    }
}
