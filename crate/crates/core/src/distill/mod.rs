//! Supervised training, Hinton-style distillation and attention transfer.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{batch_order, Dataset};
use crate::error::{Error, Result};
use crate::tensor::{KdWeights, Sgd, Tape, Tensor};
use crate::zoo::{Mode, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Multiplies the learning rate at every epoch listed in `decay_epochs`.
    pub lr_decay: f64,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { epochs: 10, batch: 64, lr: 0.05, lr_decay: 0.2, decay_epochs: vec![], momentum: 0.9, weight_decay: 5e-4, seed: 0 }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig("epochs and batch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("lr, momentum and weight decay must be non-negative".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidConfig(format!("lr_decay {} outside (0, 1]", self.lr_decay)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay.powi(steps as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdHyper {
    pub tau: f64,
    pub alpha: f64,
    /// Weight of the attention-transfer term at the `final_conv` tap.
    pub beta: f64,
}

impl Default for KdHyper {
    fn default() -> Self {
        Self { tau: 4.0, alpha: 0.9, beta: 0.0 }
    }
}

impl KdHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(self.beta >= 0.0) {
            return Err(Error::InvalidConfig("alpha must lie in [0,1] and beta be non-negative".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> KdWeights<f32> {
        KdWeights { alpha: self.alpha as f32, tau: self.tau as f32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub(crate) fn push(&mut self, epoch: usize, split: &str, loss: f64, accuracy: f64) {
        self.epochs.push(EpochStats { epoch, split: split.into(), loss, accuracy });
    }

    pub fn last(&self, split: &str) -> Option<&EpochStats> {
        self.epochs.iter().rev().find(|e| e.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss,accuracy\n");
        for e in &self.epochs {
            writeln!(s, "{},{},{:.6},{:.6}", e.epoch, e.split, e.loss, e.accuracy).expect("string write");
        }
        s
    }
}

/// Inference-mode logits for every image, computed in chunks of `batch`.
pub fn predict_logits(model: &Model, images: &Tensor<f32>, batch: usize) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(batch.max(1)) {
        let chunk = images.slice_outer(start, batch.min(n - start))?;
        let rec = model.forward(&chunk)?;
        parts.push(rec.logits.ok_or_else(|| Error::InvalidSpec("model has no classifier head".into()))?);
    }
    Tensor::concat_outer(&parts.iter().collect::<Vec<_>>())
}

/// Inference-mode `final_conv` and `avg_pool` taps for every image.
pub fn predict_features(model: &Model, images: &Tensor<f32>, batch: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let n = images.shape()[0];
    let (mut maps, mut pooled) = (Vec::new(), Vec::new());
    for start in (0..n).step_by(batch.max(1)) {
        let rec = model.forward(&images.slice_outer(start, batch.min(n - start))?)?;
        maps.push(rec.final_conv);
        pooled.push(rec.avg_pool);
    }
    Ok((Tensor::concat_outer(&maps.iter().collect::<Vec<_>>())?, Tensor::concat_outer(&pooled.iter().collect::<Vec<_>>())?))
}

pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let l = logits.shape()[1];
    logits
        .data()
        .chunks_exact(l)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

pub fn accuracy(logits: &Tensor<f32>, labels: &[u8]) -> f64 {
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(&p, &y)| p == y as usize).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Mean cross-entropy and accuracy in inference mode.
pub fn evaluate(model: &Model, ds: &Dataset, batch: usize) -> Result<(f64, f64)> {
    let logits = predict_logits(model, &ds.images, batch)?;
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(logits.clone());
    let ce = tape.softmax_cross_entropy(v, &ds.labels_usize())?;
    Ok((tape.value(ce).item() as f64, accuracy(&logits, &ds.labels)))
}

/// What the student is fitted to on each batch.
enum Target<'a> {
    Labels,
    Teacher { logits: &'a Tensor<f32>, maps: Option<&'a Tensor<f32>>, kd: KdHyper },
}

fn fit(
    model: &mut Model,
    images: &Tensor<f32>,
    labels: Option<&[u8]>,
    target: Target<'_>,
    h: &TrainHyper,
    eval: Option<&Dataset>,
) -> Result<History> {
    h.validate()?;
    let n = images.shape()[0];
    let mut opt = Sgd::new(h.lr as f32, h.momentum as f32, h.weight_decay as f32);
    let mut hist = History::default();
    for epoch in 0..h.epochs {
        opt.lr = h.lr_at(epoch) as f32;
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for (b, idx) in batch_order(n, h.batch, h.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).into_iter().enumerate() {
            let x = images.gather_outer(&idx)?;
            let y: Option<Vec<usize>> = labels.map(|l| idx.iter().map(|&i| l[i] as usize).collect());
            let mut tape = Tape::new();
            let pv = model.bind(&mut tape, true);
            let xv = tape.constant(x);
            let fwd = model.forward_on(&mut tape, &pv, xv, Mode::Train)?;
            let logits = fwd.taps.logits.ok_or_else(|| Error::InvalidSpec("student has no classifier head".into()))?;
            let loss = match &target {
                Target::Labels => tape.softmax_cross_entropy(logits, y.as_deref().expect("labelled fit"))?,
                Target::Teacher { logits: tl, maps, kd } => {
                    let t = tl.gather_outer(&idx)?;
                    let mut loss = tape.kd_loss(logits, &t, y.as_deref(), kd.weights())?;
                    if let (Some(maps), true) = (maps, kd.beta > 0.0) {
                        let tm = tape.constant(maps.gather_outer(&idx)?);
                        let at = tape.at_loss(tm, fwd.taps.final_conv)?;
                        let at = tape.scale(at, kd.beta as f32)?;
                        loss = tape.add(loss, at)?;
                    }
                    loss
                }
            };
            let lv = tape.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("loss became {lv} at epoch {epoch}, batch {b}")));
            }
            if let Some(y) = &y {
                let pred = argmax_rows(tape.value(logits));
                hits += pred.iter().zip(y).filter(|(p, t)| p == t).count();
            }
            loss_sum += lv * idx.len() as f64;
            tape.backward(loss)?;
            model.load_grads(&tape, &pv)?;
            opt.step(&mut model.params)?;
            model.update_running(&fwd.batch_stats);
        }
        let acc = if labels.is_some() { hits as f64 / n as f64 } else { f64::NAN };
        hist.push(epoch, "train", loss_sum / n as f64, acc);
        if let Some(ds) = eval {
            let (l, a) = evaluate(model, ds, 256)?;
            hist.push(epoch, "test", l, a);
        }
    }
    Ok(hist)
}

/// Cross-entropy training with SGD; optionally evaluates `test` after each
/// epoch. Aborts with [`Error::Numerical`] on a non-finite loss.
pub fn train_supervised(model: &mut Model, train: &Dataset, test: Option<&Dataset>, h: &TrainHyper) -> Result<History> {
    if train.classes != model.spec().classes {
        return Err(Error::InvalidConfig(format!("dataset has {} classes, model {}", train.classes, model.spec().classes)));
    }
    fit(model, &train.images, Some(&train.labels), Target::Labels, h, test)
}

/// Teacher outputs over a transfer set, computed once since the teacher is
/// frozen.
pub struct TeacherCache {
    pub logits: Tensor<f32>,
    pub maps: Option<Tensor<f32>>,
}

impl TeacherCache {
    pub fn compute(teacher: &Model, images: &Tensor<f32>, with_maps: bool) -> Result<Self> {
        if with_maps {
            let (maps, _) = predict_features(teacher, images, 256)?;
            Ok(Self { logits: predict_logits(teacher, images, 256)?, maps: Some(maps) })
        } else {
            Ok(Self { logits: predict_logits(teacher, images, 256)?, maps: None })
        }
    }
}

/// Distil `teacher` into `student` over `images`. Labels are needed only
/// when `kd.alpha < 1`. The teacher is never modified.
pub fn train_kd(
    student: &mut Model,
    teacher: &Model,
    images: &Tensor<f32>,
    labels: Option<&[u8]>,
    h: &TrainHyper,
    kd: &KdHyper,
    eval: Option<&Dataset>,
) -> Result<History> {
    kd.validate()?;
    let cache = TeacherCache::compute(teacher, images, kd.beta > 0.0)?;
    train_kd_cached(student, &cache, images, labels, h, kd, eval)
}

pub fn train_kd_cached(
    student: &mut Model,
    cache: &TeacherCache,
    images: &Tensor<f32>,
    labels: Option<&[u8]>,
    h: &TrainHyper,
    kd: &KdHyper,
    eval: Option<&Dataset>,
) -> Result<History> {
    kd.validate()?;
    if kd.alpha < 1.0 && labels.is_none() {
        return Err(Error::InvalidConfig("kd with alpha < 1 needs labels".into()));
    }
    let target = Target::Teacher { logits: &cache.logits, maps: cache.maps.as_ref(), kd: *kd };
    fit(student, images, labels, target, h, eval)
}

/// Value of the distillation loss for given logits (64-bit).
pub fn kd_loss(student: &Tensor<f64>, teacher: &Tensor<f64>, labels: Option<&[usize]>, kd: &KdHyper) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(student.clone());
    let l = tape.kd_loss(s, teacher, labels, KdWeights { alpha: kd.alpha, tau: kd.tau })?;
    Ok(tape.value(l).item())
}

/// Value of the attention-transfer distance between two map batches.
pub fn at_loss(teacher: &Tensor<f64>, student: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let (t, s) = (tape.constant(teacher.clone()), tape.constant(student.clone()));
    let l = tape.at_loss(t, s)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identical_logits_pure_kd_is_zero() {
        let x = t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, 0.1]);
        let kd = KdHyper { tau: 4.0, alpha: 1.0, beta: 0.0 };
        assert!(kd_loss(&x, &x, None, &kd).unwrap().abs() < 1e-12);
    }

    #[test]
    fn alpha_zero_is_cross_entropy() {
        let s = t(&[1, 2], &[0.0, 0.0]);
        let tl = t(&[1, 2], &[5.0, -5.0]);
        let kd = KdHyper { tau: 2.0, alpha: 0.0, beta: 0.0 };
        assert!((kd_loss(&s, &tl, Some(&[0]), &kd).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn closed_form_two_class_kl() {
        // softmax([2,0]) = (e²/(e²+1), 1/(e²+1)); student uniform
        let p = (2f64).exp() / ((2f64).exp() + 1.0);
        let oracle = p * (p / 0.5).ln() + (1.0 - p) * ((1.0 - p) / 0.5).ln();
        let kd = KdHyper { tau: 1.0, alpha: 1.0, beta: 0.0 };
        let v = kd_loss(&t(&[1, 2], &[0.0, 0.0]), &t(&[1, 2], &[2.0, 0.0]), None, &kd).unwrap();
        assert!((v - oracle).abs() < 1e-12, "{v} vs {oracle}");
        // frozen from an independent float64 script
        assert!((v - 0.327_813_325_472_737_7).abs() < 1e-12);
    }

    #[test]
    fn kd_rejects_bad_temperature() {
        let x = t(&[1, 2], &[0.0, 1.0]);
        assert!(kd_loss(&x, &x, None, &KdHyper { tau: 0.0, alpha: 1.0, beta: 0.0 }).is_err());
    }

    #[test]
    fn at_loss_invariances() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.37).sin());
        assert_eq!(at_loss(&a, &a).unwrap(), 0.0);
        assert!(at_loss(&a, &a.map(|v| -v)).unwrap() < 1e-12);
        let permuted = a.select_channels(&[2, 0, 1]).unwrap();
        assert!(at_loss(&a, &permuted).unwrap() < 1e-12);
        let wider = Tensor::<f64>::from_fn(&[2, 5, 2, 2], |i| (i as f64 * 0.11).cos());
        assert!(at_loss(&a, &wider).unwrap() > 0.0);
        let zero = Tensor::<f64>::zeros(&[2, 3, 2, 2]);
        assert!(at_loss(&zero, &zero).unwrap() == 0.0);
    }

    #[test]
    fn lr_schedule() {
        let h = TrainHyper { lr: 1.0, lr_decay: 0.5, decay_epochs: vec![2, 4], ..TrainHyper::default() };
        assert_eq!([h.lr_at(0), h.lr_at(2), h.lr_at(3), h.lr_at(4)], [1.0, 0.5, 0.5, 0.25]);
    }
}
