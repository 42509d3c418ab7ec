//! `EDAI` dataset file: little-endian `"EDAI"`, u16 version, u32 N, u8 C,
//! u16 H, u16 W, u8 L, N×u8 labels, N·C·H·W×f32 pixels, then a CRC32 of
//! every preceding byte.

use std::path::Path;

use super::Dataset;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EDAI_MAGIC: [u8; 4] = *b"EDAI";
const VERSION: u16 = 1;

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let (c, h, w) = ds.image_shape();
    let too_big = |what: &str| Error::InvalidConfig(format!("{what} does not fit the EDAI header"));
    let mut out = Writer::new(&EDAI_MAGIC, VERSION);
    out.u32(u32::try_from(ds.len()).map_err(|_| too_big("image count"))?);
    out.u8(u8::try_from(c).map_err(|_| too_big("channel count"))?);
    out.u16(u16::try_from(h).map_err(|_| too_big("height"))?);
    out.u16(u16::try_from(w).map_err(|_| too_big("width"))?);
    out.u8(u8::try_from(ds.classes).map_err(|_| too_big("class count"))?);
    out.bytes(&ds.labels);
    out.f32s(ds.images.data().iter().copied());
    Ok(out.finish())
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(buf, &EDAI_MAGIC, VERSION)?;
    let n = r.u32()? as usize;
    let (c, h, w) = (r.u8()? as usize, r.u16()? as usize, r.u16()? as usize);
    let classes = r.u8()? as usize;
    let labels = r.bytes(n)?.to_vec();
    let pixels = r.f32s(n * c * h * w)?;
    r.finish()?;
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidConfig(format!("degenerate EDAI header N={n} C={c} H={h} W={w}")));
    }
    Dataset::new(Tensor::new(&[n, c, h, w], pixels)?, labels, classes)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_shapes, MotifSet, ShapesConfig};

    fn bytes() -> Vec<u8> {
        let ds = gen_shapes(&ShapesConfig { size: 8, ..ShapesConfig::new(MotifSet::Primary, 2, 3, 0.2, 0) }).unwrap();
        encode_dataset(&ds).unwrap()
    }

    #[test]
    fn round_trip() {
        let b = bytes();
        let ds = decode_dataset(&b).unwrap();
        assert_eq!(encode_dataset(&ds).unwrap(), b);
        assert_eq!(b.len(), 4 + 2 + 4 + 1 + 2 + 2 + 1 + 6 + 6 * 3 * 64 * 4 + 4);
    }

    #[test]
    fn bad_magic() {
        let mut b = bytes();
        b[1] = b'X';
        assert!(matches!(decode_dataset(&b), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn declared_count_exceeds_payload() {
        let mut b = bytes();
        b[6..10].copy_from_slice(&1000u32.to_le_bytes());
        assert!(matches!(decode_dataset(&b), Err(Error::Truncated { .. })));
    }

    #[test]
    fn payload_flip_fails_checksum() {
        let mut b = bytes();
        let i = b.len() - 10;
        b[i] ^= 1;
        assert!(matches!(decode_dataset(&b), Err(Error::ChecksumMismatch { .. })));
    }
}
