//! Self-describing model file: spec JSON, parameter tensors and batch-norm
//! statistics, stored as f32.
//!
//! Layout (little-endian): `"EDPM"`, u16 version, u32 spec length, spec JSON
//! bytes, u32 tensor count, per tensor {u8 rank, u32 extents, f32 values},
//! u32 BN layer count, per layer {u32 C, C×f32 mean, C×f32 var}, CRC32.

use std::path::Path;

use super::model::{BnStats, Model};
use super::spec::ModelSpec;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const PARAM_MAGIC: [u8; 4] = *b"EDPM";
const VERSION: u16 = 1;

pub fn encode_model<T: Real>(m: &Model<T>) -> Vec<u8> {
    let mut w = Writer::new(&PARAM_MAGIC, VERSION);
    let spec = serde_json::to_vec(m.spec()).expect("spec serialises");
    w.u32(spec.len() as u32);
    w.bytes(&spec);
    w.u32(m.params.len() as u32);
    for p in &m.params {
        w.u8(p.shape().len() as u8);
        for &d in p.shape() {
            w.u32(d as u32);
        }
        w.f32s(p.data().iter().map(|v| v.as_f64() as f32));
    }
    w.u32(m.running.len() as u32);
    for r in &m.running {
        w.u32(r.mean.len() as u32);
        w.f32s(r.mean.iter().map(|v| v.as_f64() as f32));
        w.f32s(r.var.iter().map(|v| v.as_f64() as f32));
    }
    w.finish()
}

pub fn decode_model<T: Real>(buf: &[u8]) -> Result<Model<T>> {
    let mut r = Reader::open(buf, &PARAM_MAGIC, VERSION)?;
    let len = r.u32()? as usize;
    let spec: ModelSpec = serde_json::from_slice(r.bytes(len)?)?;
    let count = r.u32()? as usize;
    let mut params = Vec::new();
    for _ in 0..count {
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::InvalidSpec("tensor size overflows".into()))?;
        let data = r.f32s(n)?.into_iter().map(|v| T::of(v as f64)).collect();
        params.push(Tensor::new(&shape, data)?);
    }
    let bns = r.u32()? as usize;
    let mut running = Vec::new();
    for _ in 0..bns {
        let c = r.u32()? as usize;
        let conv = |v: Vec<f32>| v.into_iter().map(|x| T::of(x as f64)).collect();
        let mean = conv(r.f32s(c)?);
        let var = conv(r.f32s(c)?);
        running.push(BnStats { mean, var });
    }
    r.finish()?;
    Model::from_parts(&spec, params, running)
}

pub fn write_model<T: Real>(m: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_model(m))?;
    Ok(())
}

pub fn read_model<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    decode_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{WrnConfig, InputShape};

    #[test]
    fn round_trip_and_corruption() {
        let spec = WrnConfig::new(10, 1).unwrap().spec(InputShape::new(3, 8, 8), 3);
        let m = Model::<f32>::build(&spec, 4).unwrap();
        let bytes = encode_model(&m);
        assert_eq!(decode_model::<f32>(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model::<f32>(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(decode_model::<f32>(&bad).is_err());
        assert!(matches!(decode_model::<f32>(&bytes[..bytes.len() - 9]), Err(Error::Truncated { .. })));
    }
}
