//! Little-endian helpers shared by the dataset and checkpoint formats.
//!
//! A file is a 4-byte magic, a `u32` version, a fixed header and a run of
//! sections. Each section is a 4-byte tag, a `u64` byte length and payload.

use std::io::{Read, Write};

use crate::error::FormatError;

pub(crate) type FormatResult<T> = Result<T, FormatError>;

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> FormatResult<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    pub fn u32(&mut self, v: u32) -> FormatResult<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> FormatResult<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn section(&mut self, tag: &[u8; 4], payload: &[u8]) -> FormatResult<()> {
        self.bytes(tag)?;
        self.u64(payload.len() as u64)?;
        self.bytes(payload)
    }

    pub fn finish(mut self) -> FormatResult<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Cursor over an in-memory file image.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, section: &str) -> FormatResult<&'a [u8]> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                section: section.to_string(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self, section: &str) -> FormatResult<u32> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, section: &str) -> FormatResult<u64> {
        let b = self.take(8, section)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> FormatResult<()> {
        let b = self.take(4, "magic")?;
        let found: [u8; 4] = b.try_into().expect("4 bytes");
        if &found != expected {
            return Err(FormatError::BadMagic {
                expected: *expected,
                found,
            });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> FormatResult<()> {
        let found = self.u32("header")?;
        if found != expected {
            return Err(FormatError::Version { expected, found });
        }
        Ok(())
    }

    /// Reads the next section, which must carry `tag`, and returns its payload.
    pub fn section(&mut self, tag: &[u8; 4]) -> FormatResult<&'a [u8]> {
        let name = String::from_utf8_lossy(tag).into_owned();
        let found = self.take(4, &name)?;
        if found != tag {
            return Err(FormatError::Malformed(format!(
                "expected section {name}, found {:?}",
                String::from_utf8_lossy(found)
            )));
        }
        let len = self.u64(&name)?;
        let len = usize::try_from(len)
            .map_err(|_| FormatError::Malformed(format!("section {name} too large")))?;
        self.take(len, &name)
    }

    pub fn expect_end(&self) -> FormatResult<()> {
        if self.remaining() != 0 {
            return Err(FormatError::Malformed(format!(
                "{} trailing bytes",
                self.remaining()
            )));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> FormatResult<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

pub(crate) fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn u32s_to_bytes(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

pub(crate) fn bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

pub(crate) fn bytes_to_u32s(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}
