//! Reverse-mode tape.
//!
//! Every op appends a node whose inputs are strictly earlier nodes, so the
//! node list is already a topological order and `backward` is a single
//! reverse sweep. A tape can be swept once; a second `backward` is an error.

use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{attention_maps, conv2d_backward, conv2d_forward, log_softmax_rows, ConvGeom};
use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    /// Position of the node on its tape.
    pub fn index(self) -> usize {
        self.idx
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Dense { x: usize, w: usize, b: Option<usize> },
    Relu(usize),
    GlobalAvgPool(usize),
    BatchNorm { x: usize, gamma: usize, beta: usize, mean: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Concat(Vec<usize>),
    SoftmaxCe { logits: usize, labels: Vec<usize>, probs: Vec<T> },
    Kd { student: usize, labels: Option<Vec<usize>>, teacher_soft: Vec<T>, student_soft: Vec<T>, student_probs: Vec<T>, alpha: T, tau: T },
    At { teacher: usize, student: usize },
    SqDist { x: usize, target: Vec<T> },
    TotalVariation(usize),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Hyper-parameters of the softened-KL distillation loss.
#[derive(Clone, Copy, Debug)]
pub struct KdWeights<T> {
    pub alpha: T,
    pub tau: T,
}

pub struct Tape<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        value.grad = None;
        value.requires_grad = requires_grad;
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.idx)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Record a tensor as a leaf; it participates in backward iff
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Record a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Nodes that node `i` was computed from, in argument order. Leaves
    /// have none.
    pub fn inputs_of(&self, i: usize) -> Vec<usize> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Dense { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Relu(a) | Op::GlobalAvgPool(a) | Op::Scale(a, _) | Op::Sum(a) | Op::TotalVariation(a) => vec![*a],
            Op::Concat(v) => v.clone(),
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::Kd { student, .. } => vec![*student],
            Op::At { teacher, student } => vec![*teacher, *student],
            Op::SqDist { x, .. } => vec![*x],
        }
    }

    /// Short name of the op that produced node `i`.
    pub fn op_name(&self, i: usize) -> &'static str {
        match &self.nodes[i].op {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Dense { .. } => "dense",
            Op::Relu(_) => "relu",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Concat(_) => "concat",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Kd { .. } => "kd_loss",
            Op::At { .. } => "at_loss",
            Op::SqDist { .. } => "sq_dist",
            Op::TotalVariation(_) => "total_variation",
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.idx].value
    }

    /// Gradient of the swept loss with respect to `v`, if one was produced.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let geom = ConvGeom::new(
            self.nodes[xi].value.shape(),
            self.nodes[wi].value.shape(),
            bi.map(|b| self.nodes[b].value.shape()),
            stride,
            pad,
        )?;
        let out = conv2d_forward(
            &geom,
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            bi.map(|b| self.nodes[b].value.data()),
        );
        let rg = self.rg(xi) || self.rg(wi) || bi.is_some_and(|b| self.rg(b));
        let value = Tensor::new(&geom.out_shape(), out)?;
        Ok(self.push(value, Op::Conv2d { x: xi, w: wi, b: bi, geom }, rg))
    }

    /// `x[N×F] · w[F×G] + b[G]`
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let (xs, ws) = (self.nodes[xi].value.shape(), self.nodes[wi].value.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("dense", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (n, f, g) = (xs[0], xs[1], ws[1]);
        if let Some(b) = bi {
            if self.nodes[b].value.shape() != [g] {
                return Err(Error::shape("dense", format!("bias {:?} vs G={g}", self.nodes[b].value.shape())));
            }
        }
        let mut out = vec![T::zero(); n * g];
        gemm_nn(n, g, f, self.nodes[xi].value.data(), self.nodes[wi].value.data(), &mut out);
        if let Some(b) = bi {
            let bd = self.nodes[b].value.data();
            for row in out.chunks_exact_mut(g) {
                row.iter_mut().zip(bd).for_each(|(o, &bv)| *o += bv);
            }
        }
        let rg = self.rg(xi) || self.rg(wi) || bi.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, g], out)?, Op::Dense { x: xi, w: wi, b: bi }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = self.nodes[xi].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(xi);
        Ok(self.push(v, Op::Relu(xi), rg))
    }

    /// `N×C×H×W → N×C`, mean over each plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = global_avg_pool(&self.nodes[xi].value)?;
        let rg = self.rg(xi);
        Ok(self.push(v, Op::GlobalAvgPool(xi), rg))
    }

    /// Per-channel normalisation of an `N×C×H×W` tensor. With
    /// `stats = None` the batch statistics are used (and returned); otherwise
    /// the supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xs = self.nodes[xi].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm", format!("input must be NCHW, got {xs:?}")));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        for p in [gi, bi] {
            if self.nodes[p].value.shape() != [c] {
                return Err(Error::shape("batch_norm", format!("affine {:?} vs C={c}", self.nodes[p].value.shape())));
            }
        }
        let xd = self.nodes[xi].value.data();
        let (mean, var) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let cnt = T::of((n * plane) as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        mean[ch] += xd[(i * c + ch) * plane..][..plane].iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= cnt);
                for i in 0..n {
                    for ch in 0..c {
                        let m = mean[ch];
                        var[ch] += xd[(i * c + ch) * plane..][..plane].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= cnt);
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.nodes[gi].value.data(), self.nodes[bi].value.data());
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                let (m, is, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for (o, &v) in out[off..off + plane].iter_mut().zip(&xd[off..off + plane]) {
                    *o = g * (v - m) * is + b;
                }
            }
        }
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        let value = Tensor::new(&xs, out)?;
        let op = Op::BatchNorm { x: xi, gamma: gi, beta: bi, mean: mean.clone(), inv_std, batch_stats: stats.is_none() };
        Ok((self.push(value, op, rg), mean, var))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ai, bi)?;
        let data = self.nodes[ai].value.data().iter().zip(self.nodes[bi].value.data()).map(|(&x, &y)| x + y).collect();
        let v = Tensor::new(self.nodes[ai].value.shape(), data)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(v, Op::Add(ai, bi), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ai, bi)?;
        let data = self.nodes[ai].value.data().iter().zip(self.nodes[bi].value.data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::new(self.nodes[ai].value.shape(), data)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(v, Op::Mul(ai, bi), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = self.nodes[ai].value.map(|x| x * s);
        let rg = self.rg(ai);
        Ok(self.push(v, Op::Scale(ai, s), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let s = self.nodes[ai].value.data().iter().copied().sum::<T>();
        let rg = self.rg(ai);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ai), rg))
    }

    /// Join `N×F_i` blocks into `N×ΣF_i`.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let first = idx.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let n = self.nodes[*first].value.shape()[0];
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != 2 || s[0] != n {
                return Err(Error::shape("concat", format!("expected {n}×F, got {s:?}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&i, &f) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].value.data()[row * f..(row + 1) * f]);
            }
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::new(&[n, total], out)?, Op::Concat(idx), rg))
    }

    fn check_labels(&self, logits: usize, labels: &[usize]) -> Result<(usize, usize)> {
        let s = self.nodes[logits].value.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", format!("logits {s:?} vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
            return Err(Error::LabelOutOfRange { label: bad, classes: s[1] });
        }
        Ok((s[0], s[1]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let (n, l) = self.check_labels(li, labels)?;
        let logp = log_softmax_rows(self.nodes[li].value.data(), l, T::one());
        let loss = labels.iter().enumerate().map(|(i, &y)| -logp[i * l + y]).sum::<T>() / T::of(n as f64);
        let probs = logp.iter().map(|v| v.exp()).collect();
        let rg = self.rg(li);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits: li, labels: labels.to_vec(), probs }, rg))
    }

    /// `α·τ²·KL(softmax(t/τ) ‖ softmax(s/τ)) + (1−α)·CE(s, y)`, batch mean.
    /// Labels may be omitted only when `α = 1`.
    pub fn kd_loss(&mut self, student: Var, teacher: &Tensor<T>, labels: Option<&[usize]>, w: KdWeights<T>) -> Result<Var> {
        let si = self.idx(student)?;
        if !(w.tau > T::zero()) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {}", w.tau)));
        }
        if !(w.alpha >= T::zero() && w.alpha <= T::one()) {
            return Err(Error::InvalidConfig(format!("alpha must lie in [0,1], got {}", w.alpha)));
        }
        let ss = self.nodes[si].value.shape().to_vec();
        if ss.len() != 2 || teacher.shape() != ss.as_slice() {
            return Err(Error::shape("kd_loss", format!("student {ss:?} vs teacher {:?}", teacher.shape())));
        }
        let (n, l) = (ss[0], ss[1]);
        let ce_weight = T::one() - w.alpha;
        let labels = match labels {
            Some(y) => {
                self.check_labels(si, y)?;
                Some(y.to_vec())
            }
            None if ce_weight > T::zero() => {
                return Err(Error::InvalidConfig("kd_loss with alpha < 1 needs labels".into()));
            }
            None => None,
        };
        let sd = self.nodes[si].value.data();
        let t_logp = log_softmax_rows(teacher.data(), l, w.tau);
        let s_logp = log_softmax_rows(sd, l, w.tau);
        let mut kl = T::zero();
        for (&tl, &sl) in t_logp.iter().zip(&s_logp) {
            let p = tl.exp();
            if p > T::zero() {
                kl += p * (tl - sl);
            }
        }
        let nn = T::of(n as f64);
        let mut loss = w.alpha * w.tau * w.tau * kl / nn;
        let s_logp1 = log_softmax_rows(sd, l, T::one());
        if let Some(y) = &labels {
            let ce = y.iter().enumerate().map(|(i, &c)| -s_logp1[i * l + c]).sum::<T>() / nn;
            loss += ce_weight * ce;
        }
        let op = Op::Kd {
            student: si,
            labels,
            teacher_soft: t_logp.iter().map(|v| v.exp()).collect(),
            student_soft: s_logp.iter().map(|v| v.exp()).collect(),
            student_probs: s_logp1.iter().map(|v| v.exp()).collect(),
            alpha: w.alpha,
            tau: w.tau,
        };
        let rg = self.rg(si);
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Attention-transfer distance between two `N×C×H×W` maps (channel
    /// counts may differ): batch mean of `‖A_t − A_s‖₂` where `A` is the
    /// L2-normalised channel sum of squares.
    pub fn at_loss(&mut self, teacher: Var, student: Var) -> Result<Var> {
        let (ti, si) = (self.idx(teacher)?, self.idx(student)?);
        let (ts, ss) = (self.nodes[ti].value.shape(), self.nodes[si].value.shape());
        if ts.len() != 4 || ss.len() != 4 || ts[0] != ss[0] || ts[2..] != ss[2..] {
            return Err(Error::shape("at_loss", format!("teacher {ts:?} vs student {ss:?}")));
        }
        let (n, plane) = (ts[0], ts[2] * ts[3]);
        let (at, _) = attention_maps(self.nodes[ti].value.data(), n, ts[1], plane);
        let (as_, _) = attention_maps(self.nodes[si].value.data(), n, ss[1], plane);
        let mut loss = T::zero();
        for i in 0..n {
            let d = at[i * plane..(i + 1) * plane]
                .iter()
                .zip(&as_[i * plane..(i + 1) * plane])
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>();
            loss += d.sqrt();
        }
        loss /= T::of(n as f64);
        let rg = self.rg(ti) || self.rg(si);
        Ok(self.push(Tensor::scalar(loss), Op::At { teacher: ti, student: si }, rg))
    }

    /// `Σ (x − target)²` over every element.
    pub fn sq_dist(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let xi = self.idx(x)?;
        if self.nodes[xi].value.shape() != target.shape() {
            return Err(Error::shape("sq_dist", format!("{:?} vs {:?}", self.nodes[xi].value.shape(), target.shape())));
        }
        let s = self.nodes[xi].value.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let rg = self.rg(xi);
        Ok(self.push(Tensor::scalar(s), Op::SqDist { x: xi, target: target.data().to_vec() }, rg))
    }

    /// Squared total variation of an `N×C×H×W` image batch.
    pub fn total_variation(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        if v.shape().len() != 4 {
            return Err(Error::shape("total_variation", format!("input must be NCHW, got {:?}", v.shape())));
        }
        let s = total_variation(v);
        let rg = self.rg(xi);
        Ok(self.push(Tensor::scalar(s), Op::TotalVariation(xi), rg))
    }

    /// Sweep the tape backwards from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let li = self.idx(loss)?;
        if !self.nodes[li].value.is_scalar() {
            return Err(Error::NonScalarLoss(self.nodes[li].value.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // only differentiable nodes keep a gradient
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        fn acc<T: Real>(grads: &mut [Option<Vec<T>>], j: usize, n: usize) -> &mut [T] {
            grads[j].get_or_insert_with(|| vec![T::zero(); n])
        }
        let numel = |j: usize| nodes[j].value.numel();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (x, w) = (*x, *w);
                let mut dx = wants(x).then(|| grads[x].take().unwrap_or_else(|| vec![T::zero(); numel(x)]));
                let mut dw = wants(w).then(|| grads[w].take().unwrap_or_else(|| vec![T::zero(); numel(w)]));
                let mut db = b.filter(|&b| wants(b)).map(|b| grads[b].take().unwrap_or_else(|| vec![T::zero(); numel(b)]));
                conv2d_backward(
                    geom,
                    nodes[x].value.data(),
                    nodes[w].value.data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    grads[x] = Some(d);
                }
                if let Some(d) = dw {
                    grads[w] = Some(d);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    grads[*b] = Some(d);
                }
            }
            Op::Dense { x, w, b } => {
                let (x, w) = (*x, *w);
                let xs = nodes[x].value.shape();
                let (n, f) = (xs[0], xs[1]);
                let gdim = nodes[w].value.shape()[1];
                if wants(w) {
                    gemm_tn(f, gdim, n, nodes[x].value.data(), g, acc(grads, w, f * gdim));
                }
                if wants(x) {
                    gemm_nt(n, f, gdim, g, nodes[w].value.data(), acc(grads, x, n * f));
                }
                if let Some(b) = b.filter(|&b| wants(b)) {
                    let db = acc(grads, b, gdim);
                    for row in g.chunks_exact(gdim) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Relu(x) => {
                let x = *x;
                if wants(x) {
                    let xv = nodes[x].value.data();
                    let dx = acc(grads, x, xv.len());
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let x = *x;
                if wants(x) {
                    let s = nodes[x].value.shape();
                    let plane = s[2] * s[3];
                    let inv = T::one() / T::of(plane as f64);
                    let dx = acc(grads, x, numel(x));
                    for (chunk, &gv) in dx.chunks_exact_mut(plane).zip(g) {
                        let v = gv * inv;
                        chunk.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let s = nodes[x].value.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let xd = nodes[x].value.data();
                let gd = nodes[gamma].value.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * plane;
                        for (&gv, &xv) in g[off..off + plane].iter().zip(&xd[off..off + plane]) {
                            sum_g[ch] += gv;
                            sum_gx[ch] += gv * (xv - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                if wants(gamma) {
                    acc(grads, gamma, c).iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v);
                }
                if wants(beta) {
                    acc(grads, beta, c).iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
                }
                if wants(x) {
                    let m = T::of((n * plane) as f64);
                    let dx = acc(grads, x, xd.len());
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * plane;
                            let k = gd[ch] * inv_std[ch];
                            for p in off..off + plane {
                                if *batch_stats {
                                    let xhat = (xd[p] - mean[ch]) * inv_std[ch];
                                    dx[p] += k * (g[p] - sum_g[ch] / m - xhat * sum_gx[ch] / m);
                                } else {
                                    dx[p] += k * g[p];
                                }
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &j in [*a, *b].iter() {
                    if wants(j) {
                        acc(grads, j, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if wants(a) {
                    let bv = nodes[b].value.data();
                    acc(grads, a, g.len()).iter_mut().zip(g).zip(bv).for_each(|((d, &gv), &y)| *d += gv * y);
                }
                if wants(b) {
                    let av = nodes[a].value.data();
                    acc(grads, b, g.len()).iter_mut().zip(g).zip(av).for_each(|((d, &gv), &x)| *d += gv * x);
                }
            }
            Op::Scale(a, s) => {
                let a = *a;
                if wants(a) {
                    acc(grads, a, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
                }
            }
            Op::Sum(a) => {
                let a = *a;
                if wants(a) {
                    let gv = g[0];
                    acc(grads, a, numel(a)).iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::Concat(parts) => {
                let n = nodes[i].value.shape()[0];
                let total = nodes[i].value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let f = nodes[p].value.shape()[1];
                    if wants(p) {
                        let d = acc(grads, p, n * f);
                        for row in 0..n {
                            let src = &g[row * total + off..row * total + off + f];
                            d[row * f..(row + 1) * f].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    }
                    off += f;
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let li = *logits;
                let l = nodes[li].value.shape()[1];
                let scale = g[0] / T::of(labels.len() as f64);
                let d = acc(grads, li, probs.len());
                for (r, &y) in labels.iter().enumerate() {
                    for c in 0..l {
                        let target = if c == y { T::one() } else { T::zero() };
                        d[r * l + c] += scale * (probs[r * l + c] - target);
                    }
                }
            }
            Op::Kd { student, labels, teacher_soft, student_soft, student_probs, alpha, tau } => {
                let si = *student;
                let s = nodes[si].value.shape();
                let (n, l) = (s[0], s[1]);
                let nn = T::of(n as f64);
                let kd_scale = g[0] * *alpha * *tau / nn;
                let ce_scale = g[0] * (T::one() - *alpha) / nn;
                let d = acc(grads, si, n * l);
                for k in 0..n * l {
                    d[k] += kd_scale * (student_soft[k] - teacher_soft[k]);
                }
                if let Some(y) = labels {
                    for (r, &yc) in y.iter().enumerate() {
                        for c in 0..l {
                            let target = if c == yc { T::one() } else { T::zero() };
                            d[r * l + c] += ce_scale * (student_probs[r * l + c] - target);
                        }
                    }
                }
            }
            Op::At { teacher, student } => {
                let (ti, si) = (*teacher, *student);
                let ts = nodes[ti].value.shape();
                let ss = nodes[si].value.shape();
                let (n, plane) = (ts[0], ts[2] * ts[3]);
                let (at, nt) = attention_maps(nodes[ti].value.data(), n, ts[1], plane);
                let (as_, ns) = attention_maps(nodes[si].value.data(), n, ss[1], plane);
                let scale = g[0] / T::of(n as f64);
                // d loss / d normalised map, per side
                let mut gt = vec![T::zero(); n * plane];
                let mut gs = vec![T::zero(); n * plane];
                for b in 0..n {
                    let r = b * plane..(b + 1) * plane;
                    let dist = at[r.clone()].iter().zip(&as_[r.clone()]).map(|(&a, &c)| (a - c) * (a - c)).sum::<T>().sqrt();
                    if dist > T::zero() {
                        for p in r {
                            let u = (at[p] - as_[p]) / dist * scale;
                            gt[p] = u;
                            gs[p] = -u;
                        }
                    }
                }
                for (j, maps, norms, gq, ch) in [(ti, &at, &nt, &gt, ts[1]), (si, &as_, &ns, &gs, ss[1])] {
                    if !wants(j) {
                        continue;
                    }
                    let xd = nodes[j].value.data();
                    let dx = acc(grads, j, xd.len());
                    for b in 0..n {
                        if norms[b] <= T::zero() {
                            continue;
                        }
                        let q = &maps[b * plane..(b + 1) * plane];
                        let gb = &gq[b * plane..(b + 1) * plane];
                        let qg = q.iter().zip(gb).map(|(&a, &c)| a * c).sum::<T>();
                        let da: Vec<T> = q.iter().zip(gb).map(|(&qv, &gv)| (gv - qv * qg) / norms[b]).collect();
                        for c in 0..ch {
                            let off = (b * ch + c) * plane;
                            for p in 0..plane {
                                dx[off + p] += T::of(2.0) * xd[off + p] * da[p];
                            }
                        }
                    }
                }
            }
            Op::SqDist { x, target } => {
                let x = *x;
                let xv = nodes[x].value.data();
                let two = T::of(2.0) * g[0];
                acc(grads, x, xv.len()).iter_mut().zip(xv).zip(target).for_each(|((d, &a), &t)| *d += two * (a - t));
            }
            Op::TotalVariation(x) => {
                let x = *x;
                let v = &nodes[x].value;
                let s = v.shape();
                let (h, w) = (s[2], s[3]);
                let xd = v.data();
                let two = T::of(2.0) * g[0];
                let dx = acc(grads, x, xd.len());
                for plane in 0..s[0] * s[1] {
                    let off = plane * h * w;
                    for r in 0..h {
                        for c in 0..w {
                            let p = off + r * w + c;
                            if r + 1 < h {
                                let d = xd[p + w] - xd[p];
                                dx[p + w] += two * d;
                                dx[p] -= two * d;
                            }
                            if c + 1 < w {
                                let d = xd[p + 1] - xd[p];
                                dx[p + 1] += two * d;
                                dx[p] -= two * d;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("global_avg_pool", format!("input must be NCHW, got {s:?}")));
    }
    let plane = s[2] * s[3];
    let inv = T::of(plane as f64);
    let data = x.data().chunks_exact(plane).map(|c| c.iter().copied().sum::<T>() / inv).collect();
    Tensor::new(&[s[0], s[1]], data)
}

pub fn total_variation<T: Real>(v: &Tensor<T>) -> T {
    let s = v.shape();
    let (h, w) = (s[2], s[3]);
    let xd = v.data();
    let mut acc = T::zero();
    for plane in xd.chunks_exact(h * w) {
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                if r + 1 < h {
                    let d = plane[p + w] - plane[p];
                    acc += d * d;
                }
                if c + 1 < w {
                    let d = plane[p + 1] - plane[p];
                    acc += d * d;
                }
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x3() -> Tensor<f64> {
        Tensor::new(&[3], vec![-1.5, 0.25, 2.0]).unwrap().with_grad()
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(x3());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[-3.0, 0.5, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(x3());
        let c = tape.constant(Tensor::scalar(4.0));
        let zero = tape.scale(x, 0.0).unwrap();
        let s = tape.sum(zero).unwrap();
        let loss = tape.add(s, c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);

        // no path at all from x to the loss
        let mut tape = Tape::new();
        let x = tape.leaf(x3());
        let c = tape.leaf(Tensor::scalar(1.0).with_grad());
        tape.backward(c).unwrap();
        assert!(tape.grad(x).unwrap_or(&[0.0, 0.0, 0.0]).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(x3());
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_and_foreign_losses_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(x3());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let mut other = Tape::<f64>::new();
        let y = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(Error::NotOnTape)));
    }

    #[test]
    fn relu_pool_and_cross_entropy_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let img = Tensor::new(&[1, 2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 2.0, 4.0, 2.0]).unwrap();
        let v = tape.constant(img);
        let p = tape.global_avg_pool(v).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0]);

        let logits = tape.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        let ce = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((tape.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::new(&[2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 0.0]);

        let eye = tape.constant(Tensor::from_fn(&[2, 2], |i| if i % 3 == 0 { 1.0 } else { 0.0 }));
        let zero = tape.constant(Tensor::zeros(&[2]));
        let y = tape.dense(x, eye, Some(zero)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let xb = tape.constant(Tensor::zeros(&[4, 8]));
        let wb = tape.constant(Tensor::zeros(&[8, 10]));
        let yb = tape.dense(xb, wb, None).unwrap();
        assert_eq!(tape.value(yb).shape(), &[4, 10]);
        assert!(tape.dense(xb, w, None).is_err());
    }
}
