//! Little-endian framing shared by the binary file formats: a 4-byte magic,
//! a u16 version, the body, and a trailing CRC32 over every preceding byte.

use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u16) -> Self {
        let mut buf = magic.to_vec();
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn f32s(&mut self, v: impl IntoIterator<Item = f32>) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Check magic and version; the body is everything up to the CRC.
    pub fn open(buf: &'a [u8], magic: &[u8; 4], version: u16) -> Result<Self> {
        if buf.len() < 4 {
            return Err(Error::Truncated { expected: 4, actual: buf.len() });
        }
        if &buf[..4] != magic {
            return Err(Error::BadMagic { expected: *magic, found: buf[..4].try_into().expect("4 bytes") });
        }
        let mut r = Self { buf, pos: 4 };
        let v = r.u16()?;
        if v != version {
            return Err(Error::UnsupportedVersion(v));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        // the trailing 4 bytes are the checksum, never body
        let end = self.pos.checked_add(n).filter(|&e| e + 4 <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Truncated { expected: self.pos.saturating_add(n).saturating_add(4), actual: self.buf.len() }),
        }
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or(Error::Truncated { expected: usize::MAX, actual: self.buf.len() })?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    /// Verify that exactly the checksum remains and that it matches.
    pub fn finish(self) -> Result<()> {
        let rest = self.buf.len() - self.pos;
        if rest != 4 {
            return Err(Error::Truncated { expected: self.pos + 4, actual: self.buf.len() });
        }
        let stored = u32::from_le_bytes(self.buf[self.pos..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&self.buf[..self.pos]);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
