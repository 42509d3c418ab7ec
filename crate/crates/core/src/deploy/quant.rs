use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Symmetric per-tensor integer codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantized {
    pub bits: u32,
    pub scale: f32,
    pub shape: Vec<usize>,
    pub codes: Vec<i32>,
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 8 || bits == 16 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("quantisation supports 8 or 16 bits, got {bits}")))
    }
}

/// `scale = max|x| / (2^(bits−1) − 1)`, codes `round(x / scale)`. An
/// all-zero tensor gets scale 1.
pub fn quantize(t: &Tensor<f32>, bits: u32) -> Result<Quantized> {
    check_bits(bits)?;
    if !t.all_finite() {
        return Err(Error::Numerical("cannot quantise non-finite values".into()));
    }
    let qmax = ((1i64 << (bits - 1)) - 1) as f32;
    let peak = t.data().iter().fold(0.0f32, |a, &b| a.max(b.abs()));
    let scale = if peak == 0.0 { 1.0 } else { peak / qmax };
    let codes = t.data().iter().map(|&x| (x as f64 / scale as f64).round().clamp(-qmax as f64, qmax as f64) as i32).collect();
    Ok(Quantized { bits, scale, shape: t.shape().to_vec(), codes })
}

pub fn dequantize(q: &Quantized) -> Result<Tensor<f32>> {
    Tensor::new(&q.shape, q.codes.iter().map(|&c| c as f32 * q.scale).collect())
}

/// Bytes to store `params` scalars at `bits` in `tensors` separately scaled
/// tensors: `⌈params·bits/8⌉ + 4·tensors`.
pub fn memory_footprint(params: u64, tensors: u64, bits: u32) -> u64 {
    (params * bits as u64).div_ceil(8) + 4 * tensors
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_range_bound() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 1.0]).unwrap();
        let q = quantize(&x, 8).unwrap();
        let back = dequantize(&q).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= (1.0 / 127.0) / 2.0);
        }
    }

    #[test]
    fn zeros_exact() {
        let x = Tensor::zeros(&[4]);
        let q = quantize(&x, 16).unwrap();
        assert_eq!(q.scale, 1.0);
        assert_eq!(dequantize(&q).unwrap().data(), x.data());
    }

    #[test]
    fn random_within_half_step() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(&[64], |_| rng.random_range(-3.0f32..3.0));
            for bits in [8, 16] {
                let q = quantize(&x, bits).unwrap();
                let s = q.scale as f64;
                // code-level error in exact arithmetic
                assert!(x.data().iter().zip(&q.codes).all(|(&a, &c)| (a as f64 - c as f64 * s).abs() <= s / 2.0), "seed {seed}");
                // the f32 result adds at most one rounding of the output
                let back = dequantize(&q).unwrap();
                let ok = x.data().iter().zip(back.data()).all(|(&a, &b)| (a - b).abs() <= q.scale / 2.0 + a.abs() * f32::EPSILON);
                assert!(ok, "seed {seed}");
            }
        }
    }

    #[test]
    fn footprint() {
        assert_eq!(memory_footprint(0, 3, 8), 12);
        assert_eq!(memory_footprint(430_000, 0, 8), 430_000);
        assert_eq!(memory_footprint(3, 1, 16), 10);
        assert!(quantize(&Tensor::zeros(&[1]), 4).is_err());
    }
}
