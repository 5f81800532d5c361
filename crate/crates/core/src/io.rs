//! Little-endian cursor used by the binary file readers. Every failure
//! reports the byte offset where decoding stopped.

use crate::error::{Error, Result};

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.offset(),
                message: format!("truncated: need {n} bytes for {what}, {} left", self.remaining()),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != magic {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(found),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, "u32")?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, "u64")?.try_into().unwrap()))
    }

    /// A `u64` extent that must be non-zero and fit in `usize`.
    pub fn extent(&mut self) -> Result<usize> {
        let at = self.offset();
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Format {
                offset: at,
                message: format!("invalid extent {v}"),
            })
    }

    /// `u32` length followed by UTF-8 bytes.
    pub fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.offset();
        let raw = self.take(len, "string")?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at,
            message: "string is not valid UTF-8".into(),
        })
    }

    pub fn f32_values(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4, "f32 payload")?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

pub(crate) fn put_string(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}
