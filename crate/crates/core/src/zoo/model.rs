use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::spec::{InputShape, Layer, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T: Real = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; they are returned so the caller can fold them into
    /// the running averages.
    Train,
    /// Running statistics.
    Eval,
}

/// Handles of the named taps on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    pub final_conv: Var,
    pub avg_pool: Var,
    /// `None` for a headless trunk.
    pub logits: Option<Var>,
}

pub struct Forward<T: Real> {
    pub taps: Taps,
    pub batch_stats: Vec<BnStats<T>>,
}

/// Tap values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord<T: Real = f32> {
    pub final_conv: Tensor<T>,
    pub avg_pool: Tensor<T>,
    pub logits: Option<Tensor<T>>,
}

/// A [`ModelSpec`] with materialised parameters.
///
/// Parameters are stored in layer order: conv weight `K×C×R×S` then bias,
/// batch-norm scale then shift, dense weight `F×G` then bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    spec: ModelSpec,
    pub params: Vec<Tensor<T>>,
    pub running: Vec<BnStats<T>>,
}

struct ParamSlot {
    shape: Vec<usize>,
    fan_in: Option<usize>,
    init: f64,
}

fn layout(layers: &[Layer], mut c: usize, slots: &mut Vec<ParamSlot>, bns: &mut Vec<usize>) -> usize {
    for layer in layers {
        match layer {
            Layer::Conv2d { out_channels, kernel, bias, .. } => {
                let fan = c * kernel * kernel;
                slots.push(ParamSlot { shape: vec![*out_channels, c, *kernel, *kernel], fan_in: Some(fan), init: 0.0 });
                if *bias {
                    slots.push(ParamSlot { shape: vec![*out_channels], fan_in: None, init: 0.0 });
                }
                c = *out_channels;
            }
            Layer::BatchNorm => {
                slots.push(ParamSlot { shape: vec![c], fan_in: None, init: 1.0 });
                slots.push(ParamSlot { shape: vec![c], fan_in: None, init: 0.0 });
                bns.push(c);
            }
            Layer::Residual { body, shortcut } => {
                let out = layout(body, c, slots, bns);
                layout(shortcut, c, slots, bns);
                c = out;
            }
            Layer::Relu | Layer::GlobalAvgPool => {}
            Layer::Dense { out_features, bias } => {
                slots.push(ParamSlot { shape: vec![c, *out_features], fan_in: Some(c), init: 0.0 });
                if *bias {
                    slots.push(ParamSlot { shape: vec![*out_features], fan_in: None, init: 0.0 });
                }
                c = *out_features;
            }
        }
    }
    c
}

fn slots_of(spec: &ModelSpec) -> (Vec<ParamSlot>, Vec<usize>) {
    let (mut slots, mut bns) = (Vec::new(), Vec::new());
    layout(&spec.layers, spec.input.channels, &mut slots, &mut bns);
    (slots, bns)
}

/// Shapes of every parameter tensor, in storage order.
pub fn param_shapes(spec: &ModelSpec) -> Vec<Vec<usize>> {
    slots_of(spec).0.into_iter().map(|s| s.shape).collect()
}

struct Cursor<'a, T: Real> {
    params: &'a [Var],
    next: usize,
    bn: usize,
    mode: Mode,
    running: &'a [BnStats<T>],
    batch_stats: Vec<BnStats<T>>,
    final_conv: Option<Var>,
    avg_pool: Option<Var>,
}

impl<T: Real> Cursor<'_, T> {
    fn take(&mut self) -> Var {
        let v = self.params[self.next];
        self.next += 1;
        v
    }
}

impl<T: Real> Model<T> {
    /// He-normal weights, zero biases, unit BN scale; seeded.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (slots, bns) = slots_of(spec);
        let params = slots
            .iter()
            .map(|s| match s.fan_in {
                Some(f) => Tensor::he_normal(&s.shape, f, &mut rng),
                None => Tensor::full(&s.shape, T::of(s.init)),
            })
            .collect();
        let running = bns.iter().map(|&c| BnStats { mean: vec![T::zero(); c], var: vec![T::one(); c] }).collect();
        Ok(Self { spec: spec.clone(), params, running })
    }

    /// Assemble a model from existing tensors, checking every shape.
    pub fn from_parts(spec: &ModelSpec, params: Vec<Tensor<T>>, running: Vec<BnStats<T>>) -> Result<Self> {
        spec.validate()?;
        let (slots, bns) = slots_of(spec);
        if slots.len() != params.len() {
            return Err(Error::InvalidSpec(format!("expected {} parameter tensors, got {}", slots.len(), params.len())));
        }
        for (i, (s, p)) in slots.iter().zip(&params).enumerate() {
            if s.shape != p.shape() {
                return Err(Error::InvalidSpec(format!("parameter {i}: expected {:?}, got {:?}", s.shape, p.shape())));
            }
        }
        if bns.len() != running.len() || bns.iter().zip(&running).any(|(&c, r)| r.mean.len() != c || r.var.len() != c) {
            return Err(Error::InvalidSpec("batch-norm statistics do not match the spec".into()));
        }
        Ok(Self { spec: spec.clone(), params, running })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn input(&self) -> InputShape {
        self.spec.input
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Record every parameter as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone().with_grad()) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// Run the network on `x` using parameter handles from [`Self::bind`].
    pub fn forward_on(&self, tape: &mut Tape<T>, params: &[Var], x: Var, mode: Mode) -> Result<Forward<T>> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidSpec(format!("{} parameter handles for {} tensors", params.len(), self.params.len())));
        }
        let xs = tape.value(x).shape();
        let inp = self.spec.input;
        if xs.len() != 4 || xs[1..] != [inp.channels, inp.height, inp.width] {
            return Err(Error::shape("forward", format!("batch {xs:?} does not match input {inp:?}")));
        }
        let mut cur = Cursor {
            params,
            next: 0,
            bn: 0,
            mode,
            running: &self.running,
            batch_stats: Vec::new(),
            final_conv: None,
            avg_pool: None,
        };
        let out = run(&self.spec.layers, tape, x, &mut cur)?;
        let taps = Taps {
            final_conv: cur.final_conv.expect("validated spec has a pool"),
            avg_pool: cur.avg_pool.expect("validated spec has a pool"),
            logits: if self.spec.is_headless() { None } else { Some(out) },
        };
        Ok(Forward { taps, batch_stats: cur.batch_stats })
    }

    /// Inference-mode forward pass capturing all taps.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<ActivationRecord<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let f = self.forward_on(&mut tape, &params, x, Mode::Eval)?;
        Ok(ActivationRecord {
            final_conv: tape.value(f.taps.final_conv).clone(),
            avg_pool: tape.value(f.taps.avg_pool).clone(),
            logits: f.taps.logits.map(|l| tape.value(l).clone()),
        })
    }

    /// Copy gradients of `params` (as bound on `tape`) into the stored tensors.
    pub fn load_grads(&mut self, tape: &Tape<T>, params: &[Var]) -> Result<()> {
        for (i, (p, &v)) in self.params.iter_mut().zip(params).enumerate() {
            p.grad = Some(tape.grad(v).ok_or(Error::MissingGrad(i))?.to_vec());
        }
        Ok(())
    }

    /// Exponential moving average of batch statistics into the running ones.
    pub fn update_running(&mut self, batch: &[BnStats<T>]) {
        let m = T::of(BN_MOMENTUM);
        for (r, b) in self.running.iter_mut().zip(batch) {
            for (rm, &bm) in r.mean.iter_mut().zip(&b.mean) {
                *rm = (T::one() - m) * *rm + m * bm;
            }
            for (rv, &bv) in r.var.iter_mut().zip(&b.var) {
                *rv = (T::one() - m) * *rv + m * bv;
            }
        }
    }

    /// SHA-256 over spec JSON, parameter bytes and running statistics.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serialises"));
        for p in &self.params {
            for v in p.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        for r in &self.running {
            for v in r.mean.iter().chain(&r.var) {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        crate::codec::hex(&h.finalize())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect();
        Model {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            running: self.running.iter().map(|r| BnStats { mean: conv(&r.mean), var: conv(&r.var) }).collect(),
        }
    }
}

fn run<T: Real>(layers: &[Layer], tape: &mut Tape<T>, mut x: Var, cur: &mut Cursor<'_, T>) -> Result<Var> {
    for layer in layers {
        x = match layer {
            Layer::Conv2d { stride, pad, bias, .. } => {
                let w = cur.take();
                let b = bias.then(|| cur.take());
                tape.conv2d(x, w, b, *stride, *pad)?
            }
            Layer::BatchNorm => {
                let (g, b) = (cur.take(), cur.take());
                let i = cur.bn;
                cur.bn += 1;
                let eps = T::of(BN_EPS);
                match cur.mode {
                    Mode::Train => {
                        let (y, mean, var) = tape.batch_norm(x, g, b, None, eps)?;
                        cur.batch_stats.push(BnStats { mean, var });
                        y
                    }
                    Mode::Eval => {
                        let r = &cur.running[i];
                        tape.batch_norm(x, g, b, Some((&r.mean, &r.var)), eps)?.0
                    }
                }
            }
            Layer::Relu => tape.relu(x)?,
            Layer::Residual { body, shortcut } => {
                let a = run(body, tape, x, cur)?;
                let s = if shortcut.is_empty() { x } else { run(shortcut, tape, x, cur)? };
                tape.add(a, s)?
            }
            Layer::GlobalAvgPool => {
                cur.final_conv = Some(x);
                let p = tape.global_avg_pool(x)?;
                cur.avg_pool = Some(p);
                p
            }
            Layer::Dense { bias, .. } => {
                let w = cur.take();
                let b = bias.then(|| cur.take());
                tape.dense(x, w, b)?
            }
        };
    }
    Ok(x)
}
