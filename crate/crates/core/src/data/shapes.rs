use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Procedural motifs. The first ten form the primary set; the last ten are
/// a disjoint alternate set used as an out-of-distribution transfer corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motif {
    Disk,
    Ring,
    Cross,
    StripesH,
    StripesV,
    StripesDiag,
    StripesAnti,
    Checker,
    Blob,
    Triangle,
    Square,
    Glow,
    Ellipse,
    Dots,
    Crescent,
    Grid,
    Zigzag,
    Target,
    Star,
    Wave,
}

pub const PRIMARY: [Motif; 10] = [
    Motif::Disk,
    Motif::Ring,
    Motif::Cross,
    Motif::StripesH,
    Motif::StripesV,
    Motif::StripesDiag,
    Motif::StripesAnti,
    Motif::Checker,
    Motif::Blob,
    Motif::Triangle,
];

pub const ALTERNATE: [Motif; 10] = [
    Motif::Square,
    Motif::Glow,
    Motif::Ellipse,
    Motif::Dots,
    Motif::Crescent,
    Motif::Grid,
    Motif::Zigzag,
    Motif::Target,
    Motif::Star,
    Motif::Wave,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotifSet {
    Primary,
    Alternate,
}

impl MotifSet {
    pub fn motifs(self) -> &'static [Motif; 10] {
        match self {
            MotifSet::Primary => &PRIMARY,
            MotifSet::Alternate => &ALTERNATE,
        }
    }
}

impl Motif {
    pub fn name(self) -> String {
        serde_json::to_value(self).expect("unit variant").as_str().expect("string").to_owned()
    }

    /// Coverage in `[0,1]` at motif-local coordinates (unit radius).
    fn coverage(self, u: f64, v: f64) -> f64 {
        let r = (u * u + v * v).sqrt();
        let inside = |b: bool| if b { 1.0 } else { 0.0 };
        let patch = u.abs() < 1.0 && v.abs() < 1.0;
        let stripe = |t: f64| inside(patch && (t * 2.0).rem_euclid(1.0) < 0.5);
        match self {
            Motif::Disk => inside(r < 1.0),
            Motif::Ring => inside((r - 0.8).abs() < 0.2),
            Motif::Cross => inside((u.abs() < 0.25 && v.abs() < 1.0) || (v.abs() < 0.25 && u.abs() < 1.0)),
            Motif::StripesH => stripe(v),
            Motif::StripesV => stripe(u),
            Motif::StripesDiag => stripe((u + v) * std::f64::consts::FRAC_1_SQRT_2),
            Motif::StripesAnti => stripe((u - v) * std::f64::consts::FRAC_1_SQRT_2),
            Motif::Checker => inside(patch && ((u * 2.0).floor() as i64 + (v * 2.0).floor() as i64).rem_euclid(2) == 0),
            Motif::Blob => (-2.5 * r * r).exp(),
            Motif::Triangle => inside(v > -0.8 && v < 0.9 && u.abs() < (0.9 - v) * 0.6),
            Motif::Square => inside(u.abs() < 0.8 && v.abs() < 0.8),
            Motif::Glow => (-3.0 * (u * u + (v / 0.6).powi(2))).exp(),
            Motif::Ellipse => inside(u * u + (v / 0.55).powi(2) < 1.0),
            Motif::Dots => inside(patch && {
                let (fu, fv) = ((u + 1.0) * 1.5 % 1.0 - 0.5, (v + 1.0) * 1.5 % 1.0 - 0.5);
                fu * fu + fv * fv < 0.06
            }),
            Motif::Crescent => inside(r < 1.0 && ((u - 0.45).powi(2) + v * v).sqrt() > 0.8),
            Motif::Grid => inside(patch && ((u * 2.5).rem_euclid(1.0) < 0.25 || (v * 2.5).rem_euclid(1.0) < 0.25)),
            Motif::Zigzag => stripe(v + 0.3 * ((u * 2.0).rem_euclid(1.0) - 0.5).abs()),
            Motif::Target => inside(r < 0.25 || (r - 0.75).abs() < 0.15),
            Motif::Star => {
                let theta = v.atan2(u);
                inside(r < 0.35 + 0.65 * (2.5 * theta).cos().abs().powi(3))
            }
            Motif::Wave => stripe(v + 0.15 * (u * std::f64::consts::PI * 2.0).sin()),
        }
    }
}

/// Parameters of a procedural dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapesConfig {
    pub motifs: MotifSet,
    pub classes: usize,
    pub size: usize,
    pub per_class: Vec<usize>,
    pub noise: f64,
    pub seed: u64,
}

impl ShapesConfig {
    /// `classes` motifs from `set`, `n` images each, 32×32 RGB.
    pub fn new(set: MotifSet, classes: usize, n: usize, noise: f64, seed: u64) -> Self {
        Self { motifs: set, classes, size: 32, per_class: vec![n; classes], noise, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > 10 {
            return Err(Error::InvalidConfig(format!("classes must be in 1..=10, got {}", self.classes)));
        }
        if self.per_class.len() != self.classes {
            return Err(Error::InvalidConfig(format!("{} per-class counts for {} classes", self.per_class.len(), self.classes)));
        }
        if self.per_class.iter().sum::<usize>() == 0 {
            return Err(Error::InvalidConfig("dataset would be empty".into()));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::InvalidConfig(format!("noise {} outside [0, 0.5]", self.noise)));
        }
        if !(8..=u16::MAX as usize).contains(&self.size) {
            return Err(Error::InvalidConfig(format!("image size {} too small", self.size)));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.motifs.motifs()[..self.classes].iter().map(|m| m.name()).collect()
    }
}

/// Render a dataset. Images are emitted class-interleaved (round robin
/// until each class's count is exhausted).
///
/// Each image draws a dark background colour, a bright foreground colour,
/// a scale in `[0.22, 0.34]·size`, a centre jittered by up to `0.1·size`,
/// and a rotation; the motif is supersampled 2×2 and Gaussian pixel noise
/// is added before clipping to `[0,1]`.
pub fn gen_shapes(cfg: &ShapesConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).expect("validated σ");
    let s = cfg.size;
    let motifs = &cfg.motifs.motifs()[..cfg.classes];
    let mut remaining = cfg.per_class.clone();
    let total: usize = remaining.iter().sum();
    let mut pixels = Vec::with_capacity(total * 3 * s * s);
    let mut labels = Vec::with_capacity(total);
    let mut plane = vec![0.0f64; s * s];
    while labels.len() < total {
        for (c, left) in remaining.iter_mut().enumerate() {
            if *left == 0 {
                continue;
            }
            *left -= 1;
            let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.35));
            let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
            let scale = rng.random_range(0.22..0.34) * s as f64;
            let jitter = 0.10 * s as f64;
            let cy = s as f64 / 2.0 + rng.random_range(-jitter..jitter);
            let cx = s as f64 / 2.0 + rng.random_range(-jitter..jitter);
            // orientation-coded motifs keep their orientation; others rotate freely
            let max_turn = match motifs[c] {
                Motif::StripesH | Motif::StripesV | Motif::StripesDiag | Motif::StripesAnti => 0.2,
                _ => std::f64::consts::PI,
            };
            let theta: f64 = rng.random_range(-max_turn..max_turn);
            let (sin, cos) = theta.sin_cos();
            for y in 0..s {
                for x in 0..s {
                    let mut acc = 0.0;
                    for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                        let (dx, dy) = ((x as f64 + ox - cx) / scale, (y as f64 + oy - cy) / scale);
                        let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                        acc += motifs[c].coverage(u, v);
                    }
                    plane[y * s + x] = acc / 4.0;
                }
            }
            for ch in 0..3 {
                for &m in &plane {
                    let mut p = bg[ch] * (1.0 - m) + fg[ch] * m;
                    if cfg.noise > 0.0 {
                        p += noise.sample(&mut rng);
                    }
                    pixels.push(p.clamp(0.0, 1.0) as f32);
                }
            }
            labels.push(c as u8);
        }
    }
    Dataset::new(Tensor::new(&[total, 3, s, s], pixels)?, labels, cfg.classes)
}
