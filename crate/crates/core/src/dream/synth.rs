use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TargetSet;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use crate::zoo::{Mode, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthHyper {
    pub steps: usize,
    pub step_size: f64,
    /// Images start at `0.5 + N(0, init_std²)`, clipped.
    pub init_std: f64,
    pub tv_weight: f64,
    /// Maximum circular shift in pixels applied before each step.
    pub jitter: usize,
    /// Images optimised together on one tape; they do not interact.
    pub batch: usize,
    pub seed: u64,
}

impl Default for SynthHyper {
    fn default() -> Self {
        Self { steps: 60, step_size: 0.3, init_std: 0.2, tv_weight: 0.1, jitter: 1, batch: 64, seed: 0 }
    }
}

/// Synthetic images with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    pub data: Dataset,
    pub cluster: Vec<usize>,
    /// `‖avg_pool(img) − target‖²` before the first and after the last step.
    pub initial_loss: Vec<f64>,
    pub final_loss: Vec<f64>,
    /// Set when an image's loss became non-finite; that image was frozen at
    /// its last finite state.
    pub failed: Vec<bool>,
}

#[derive(Serialize)]
struct Provenance<'a> {
    cluster: &'a [usize],
    initial_loss: &'a [f64],
    final_loss: &'a [f64],
    failed: &'a [bool],
}

impl SyntheticSet {
    pub fn provenance_json(&self) -> Result<String> {
        let p = Provenance { cluster: &self.cluster, initial_loss: &self.initial_loss, final_loss: &self.final_loss, failed: &self.failed };
        Ok(serde_json::to_string(&p)?)
    }
}

/// Circular shift of each `H×W` plane by `(dy, dx)`.
fn roll(x: &[f32], planes: usize, h: usize, w: usize, dy: isize, dx: isize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for p in 0..planes {
        let (src, dst) = (&x[p * h * w..(p + 1) * h * w], &mut out[p * h * w..(p + 1) * h * w]);
        for y in 0..h {
            let ty = (y as isize + dy).rem_euclid(h as isize) as usize;
            for xx in 0..w {
                let tx = (xx as isize + dx).rem_euclid(w as isize) as usize;
                dst[ty * w + tx] = src[y * w + xx];
            }
        }
    }
    out
}

fn match_losses(pooled: &[f32], targets: &[f32], dim: usize) -> Vec<f64> {
    pooled
        .chunks_exact(dim)
        .zip(targets.chunks_exact(dim))
        .map(|(a, t)| a.iter().zip(t).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum())
        .collect()
}

/// Gradient descent on `‖avg_pool(teacher(img)) − target‖² + λ·TV(img)`
/// with pixels clipped to `[0,1]` after every step. The teacher runs in
/// inference mode, so images in a batch are independent.
pub fn synthesize_images(teacher: &Model, targets: &TargetSet, h: &SynthHyper) -> Result<SyntheticSet> {
    if h.steps == 0 || h.batch == 0 {
        return Err(Error::InvalidConfig("synthesis needs at least one step and a positive batch".into()));
    }
    let inp = teacher.input();
    let (c, hh, ww) = (inp.channels, inp.height, inp.width);
    let per = c * hh * ww;
    let dim = teacher.spec().final_channels()?;
    if let Some(t) = targets.targets.iter().find(|t| t.vector.len() != dim) {
        return Err(Error::shape("synthesize_images", format!("target of length {} for {dim} channels", t.vector.len())));
    }
    let classes = teacher.spec().classes.max(targets.targets.iter().map(|t| t.class + 1).max().unwrap_or(1));
    let mut rng = ChaCha8Rng::seed_from_u64(h.seed);
    let init = Normal::new(0.5, h.init_std.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let n = targets.targets.len();
    let mut pixels = Vec::with_capacity(n * per);
    let (mut initial_loss, mut final_loss, mut failed) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in targets.targets.chunks(h.batch) {
        let b = chunk.len();
        let tgt: Vec<f32> = chunk.iter().flat_map(|t| t.vector.iter().map(|&v| v as f32)).collect();
        let tgt_t = Tensor::new(&[b, dim], tgt.clone())?;
        let mut x: Vec<f32> = (0..b * per).map(|_| (init.sample(&mut rng) as f32).clamp(0.0, 1.0)).collect();
        let mut alive = vec![true; b];
        let mut last = vec![f64::NAN; b];
        for step in 0..=h.steps {
            let (dy, dx) = if h.jitter > 0 && step < h.steps {
                let j = h.jitter as i64;
                (rng.random_range(-j..=j) as isize, rng.random_range(-j..=j) as isize)
            } else {
                (0, 0)
            };
            let shifted = roll(&x, b * c, hh, ww, dy, dx);
            let mut tape = Tape::new();
            let params = teacher.bind(&mut tape, false);
            let xv = tape.leaf(Tensor::new(&[b, c, hh, ww], shifted)?.with_grad());
            let fwd = teacher.forward_on(&mut tape, &params, xv, Mode::Eval)?;
            let pooled = tape.value(fwd.taps.avg_pool).data().to_vec();
            let losses = match_losses(&pooled, &tgt, dim);
            for (i, &l) in losses.iter().enumerate() {
                if !l.is_finite() {
                    alive[i] = false;
                }
                if alive[i] {
                    last[i] = l;
                }
            }
            if step == 0 {
                initial_loss.extend_from_slice(&losses);
            }
            if step == h.steps {
                break;
            }
            let m = tape.sq_dist(fwd.taps.avg_pool, &tgt_t)?;
            let loss = if h.tv_weight > 0.0 {
                let tv = tape.total_variation(xv)?;
                let tv = tape.scale(tv, h.tv_weight as f32)?;
                tape.add(m, tv)?
            } else {
                m
            };
            tape.backward(loss)?;
            let g = roll(tape.grad(xv).expect("input requires grad"), b * c, hh, ww, -dy, -dx);
            for i in 0..b {
                if !alive[i] {
                    continue;
                }
                let (xi, gi) = (&mut x[i * per..(i + 1) * per], &g[i * per..(i + 1) * per]);
                if gi.iter().any(|v| !v.is_finite()) {
                    alive[i] = false;
                    continue;
                }
                for (p, &d) in xi.iter_mut().zip(gi) {
                    *p = (*p - h.step_size as f32 * d).clamp(0.0, 1.0);
                }
            }
        }
        final_loss.extend_from_slice(&last);
        failed.extend(alive.iter().map(|a| !a));
        pixels.extend_from_slice(&x);
    }
    let labels = targets.targets.iter().map(|t| t.class as u8).collect();
    let data = Dataset::new(Tensor::new(&[n, c, hh, ww], pixels)?, labels, classes)?;
    Ok(SyntheticSet { data, cluster: targets.targets.iter().map(|t| t.cluster).collect(), initial_loss, final_loss, failed })
}
