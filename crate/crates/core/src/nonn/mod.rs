//! Network-of-neural-networks students: one independent trunk per filter
//! group of the teacher, joined only by a shared dense head.

mod taint;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_order, Dataset};
use crate::distill::{accuracy, argmax_rows, predict_features, predict_logits, History, KdHyper, TrainHyper};
use crate::error::{Error, Result};
use crate::fan::Partition;
use crate::tensor::{Real, Sgd, Tape, Tensor, Var};
use crate::zoo::{plain_cnn, plain_cnn_bn, read_model, wrn_spec, write_model, BnStats, InputShape, Mode, Model, ModelSpec};

pub use taint::{taint_check, TaintReport};

/// Trunk architecture; the last stage always has exactly `F_s` filters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrunkTemplate {
    /// 3×3 conv stages `(filters, stride)` followed by a stride-1 stage of
    /// `F_s` filters.
    Plain { convs: Vec<(usize, usize)>, batch_norm: bool },
    /// Pre-activation wide residual trunk with three groups, the last of
    /// width `F_s`.
    Wrn { blocks: usize, widths: [usize; 2], stem: usize },
}

impl TrunkTemplate {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Plain { convs, .. } => convs.iter().all(|&(f, s)| f > 0 && s > 0),
            Self::Wrn { blocks, widths, stem } => *blocks > 0 && *stem > 0 && widths.iter().all(|&w| w > 0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("template dimensions must be positive: {self:?}")))
        }
    }

    /// Headless trunk spec ending in `f_s` channels and a global pool.
    pub fn spec(&self, input: InputShape, f_s: usize) -> ModelSpec {
        match self {
            Self::Plain { convs, batch_norm } => {
                let mut c = convs.clone();
                c.push((f_s, 1));
                if *batch_norm { plain_cnn_bn(input, 0, &c) } else { plain_cnn(input, 0, &c) }.trunk()
            }
            Self::Wrn { blocks, widths, stem } => wrn_spec(*blocks, [widths[0], widths[1], f_s], *stem, input, 0).trunk(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoNNHyper {
    pub template: TrunkTemplate,
    /// Weight of the per-trunk attention-transfer term.
    pub gamma: f64,
    /// Largest parameter count one device may hold (trunk plus its slice of
    /// the head).
    pub param_budget: usize,
    pub train: TrainHyper,
    pub kd: KdHyper,
}

impl Default for NoNNHyper {
    fn default() -> Self {
        Self {
            template: TrunkTemplate::Plain { convs: vec![(8, 2), (16, 2)], batch_norm: true },
            gamma: 1.0,
            param_budget: 500_000,
            train: TrainHyper::default(),
            kd: KdHyper::default(),
        }
    }
}

impl NoNNHyper {
    pub fn validate(&self) -> Result<()> {
        self.template.validate()?;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        self.train.validate()?;
        self.kd.validate()
    }
}

#[derive(Clone, Debug)]
pub struct NoNNModel<T: Real = f32> {
    pub trunks: Vec<Model<T>>,
    /// `[ΣF_s, L]`.
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    /// Teacher filters mimicked by each trunk.
    pub groups: Vec<Vec<usize>>,
}

/// Handles from one recorded forward pass.
pub struct NoNNForward<T: Real> {
    pub trunk_maps: Vec<Var>,
    pub features: Vec<Var>,
    pub concat: Var,
    pub logits: Var,
    pub batch_stats: Vec<Vec<BnStats<T>>>,
}

impl<T: Real> NoNNModel<T> {
    pub fn k(&self) -> usize {
        self.trunks.len()
    }

    pub fn classes(&self) -> usize {
        self.head_b.numel()
    }

    pub fn input(&self) -> InputShape {
        self.trunks[0].input()
    }

    /// `F_s` per trunk.
    pub fn widths(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn concat_width(&self) -> usize {
        self.widths().iter().sum()
    }

    /// Parameters held by the device running trunk `s`: the trunk, its
    /// columns of the head, and on trunk 0 (the aggregator) the head bias.
    pub fn device_params(&self, s: usize) -> usize {
        let own = self.trunks[s].num_params() + self.groups[s].len() * self.classes();
        if s == 0 { own + self.classes() } else { own }
    }

    pub fn num_params(&self) -> usize {
        self.trunks.iter().map(Model::num_params).sum::<usize>() + self.head_w.numel() + self.head_b.numel()
    }

    /// FLOPs of trunk `s` and of the head (2·MAC).
    pub fn trunk_flops(&self, s: usize) -> Result<u64> {
        self.trunks[s].spec().count_flops()
    }

    pub fn head_flops(&self) -> u64 {
        2 * self.head_w.numel() as u64
    }

    pub fn total_flops(&self) -> Result<u64> {
        let mut f = self.head_flops();
        for s in 0..self.k() {
            f += self.trunk_flops(s)?;
        }
        Ok(f)
    }

    /// Record every trunk and the head on one tape.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        trunk_params: &[Vec<Var>],
        head: (Var, Var),
        x: Var,
        mode: Mode,
    ) -> Result<NoNNForward<T>> {
        let (mut trunk_maps, mut features, mut batch_stats) = (Vec::new(), Vec::new(), Vec::new());
        for (t, p) in self.trunks.iter().zip(trunk_params) {
            let f = t.forward_on(tape, p, x, mode)?;
            trunk_maps.push(f.taps.final_conv);
            features.push(f.taps.avg_pool);
            batch_stats.push(f.batch_stats);
        }
        let concat = tape.concat(&features)?;
        let logits = tape.dense(concat, head.0, Some(head.1))?;
        Ok(NoNNForward { trunk_maps, features, concat, logits, batch_stats })
    }

    /// Whole-model inference on a single tape.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let tp: Vec<Vec<Var>> = self.trunks.iter().map(|t| t.bind(&mut tape, false)).collect();
        let x = tape.constant(batch.clone());
        let (w, b) = (tape.constant(self.head_w.clone()), tape.constant(self.head_b.clone()));
        let f = self.forward_on(&mut tape, &tp, (w, b), x, Mode::Eval)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Pooled features of trunk `s` alone, `N×F_s`.
    pub fn trunk_features(&self, s: usize, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.trunks[s].forward(batch)?.avg_pool)
    }

    /// Head applied to per-trunk features given in trunk order.
    pub fn head_logits(&self, features: &[Tensor<T>]) -> Result<Tensor<T>> {
        if features.len() != self.k() {
            return Err(Error::shape("nonn head", format!("{} feature blocks for {} trunks", features.len(), self.k())));
        }
        let mut tape = Tape::new();
        let parts: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let c = tape.concat(&parts)?;
        let (w, b) = (tape.constant(self.head_w.clone()), tape.constant(self.head_b.clone()));
        let l = tape.dense(c, w, Some(b))?;
        Ok(tape.value(l).clone())
    }

    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.trunks {
            h.update(t.fingerprint().as_bytes());
        }
        for v in self.head_w.data().iter().chain(self.head_b.data()) {
            h.update(v.as_f64().to_le_bytes());
        }
        h.update(serde_json::to_vec(&self.groups).expect("groups serialise"));
        crate::codec::hex(&h.finalize())
    }

    pub fn cast<U: Real>(&self) -> NoNNModel<U> {
        NoNNModel {
            trunks: self.trunks.iter().map(Model::cast).collect(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
            groups: self.groups.clone(),
        }
    }
}

/// Logits from trunks evaluated independently and joined at the head,
/// plus each trunk's pooled feature vectors.
pub fn infer_nonn<T: Real>(nonn: &NoNNModel<T>, batch: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let feats = (0..nonn.k()).map(|s| nonn.trunk_features(s, batch)).collect::<Result<Vec<_>>>()?;
    Ok((nonn.head_logits(&feats)?, feats))
}

/// One trunk per community of `part`, each ending in as many filters as
/// its community holds, plus a zero-bias He-initialised head.
pub fn build_nonn(teacher: &Model, part: &Partition, h: &NoNNHyper) -> Result<NoNNModel> {
    h.validate()?;
    part.validate()?;
    let classes = teacher.spec().classes;
    if classes == 0 {
        return Err(Error::InvalidSpec("teacher has no classifier head".into()));
    }
    let teacher_ch = teacher.spec().final_channels()?;
    let groups = part.filter_groups();
    if let Some(&f) = groups.iter().flatten().find(|&&f| f >= teacher_ch) {
        return Err(Error::InvalidConfig(format!("partition names filter {f}, teacher has {teacher_ch}")));
    }
    let input = teacher.input();
    let seed = h.train.seed;
    let mut trunks = Vec::with_capacity(groups.len());
    for (s, grp) in groups.iter().enumerate() {
        let spec = h.template.spec(input, grp.len());
        if h.gamma > 0.0 && spec.final_extent()? != teacher.spec().final_extent()? {
            return Err(Error::InvalidConfig(format!(
                "trunk {s} ends at {:?}, teacher at {:?}; attention transfer needs equal extents",
                spec.final_extent()?,
                teacher.spec().final_extent()?
            )));
        }
        trunks.push(Model::build(&spec, seed.wrapping_add(1 + s as u64))?);
    }
    let width: usize = groups.iter().map(Vec::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x4EAD));
    let nonn = NoNNModel {
        trunks,
        head_w: Tensor::he_normal(&[width, classes], width, &mut rng),
        head_b: Tensor::zeros(&[classes]),
        groups,
    };
    check_budget(&nonn, h.param_budget)?;
    Ok(nonn)
}

/// Every device's parameter count must stay below `limit`.
pub fn check_budget<T: Real>(nonn: &NoNNModel<T>, limit: usize) -> Result<()> {
    for s in 0..nonn.k() {
        let params = nonn.device_params(s);
        if params >= limit {
            return Err(Error::BudgetViolation { trunk: s, params, limit });
        }
    }
    Ok(())
}

/// Joint training of all trunks and the head:
/// `kd(head logits, teacher logits) + γ·Σ_s at(teacher maps on group s, trunk s maps)`.
/// The teacher is only read.
pub fn train_nonn(
    teacher: &Model,
    nonn: &mut NoNNModel,
    images: &Tensor<f32>,
    labels: Option<&[u8]>,
    h: &NoNNHyper,
    eval: Option<&Dataset>,
) -> Result<History> {
    h.validate()?;
    if h.kd.alpha < 1.0 && labels.is_none() {
        return Err(Error::InvalidConfig("kd with alpha < 1 needs labels".into()));
    }
    let t_logits = predict_logits(teacher, images, 256)?;
    let t_maps: Vec<Tensor<f32>> = if h.gamma > 0.0 {
        let (maps, _) = predict_features(teacher, images, 256)?;
        nonn.groups.iter().map(|g| maps.select_channels(g)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let n = images.shape()[0];
    let tr = &h.train;
    let mk = || Sgd::new(tr.lr as f32, tr.momentum as f32, tr.weight_decay as f32);
    let mut trunk_opt: Vec<Sgd> = (0..nonn.k()).map(|_| mk()).collect();
    let mut head_opt = mk();
    let mut hist = History::default();
    for epoch in 0..tr.epochs {
        let lr = tr.lr_at(epoch) as f32;
        trunk_opt.iter_mut().chain(std::iter::once(&mut head_opt)).for_each(|o| o.lr = lr);
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for (b, idx) in batch_order(n, tr.batch, tr.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).into_iter().enumerate() {
            let y: Option<Vec<usize>> = labels.map(|l| idx.iter().map(|&i| l[i] as usize).collect());
            let mut tape = Tape::new();
            let tp: Vec<Vec<Var>> = nonn.trunks.iter().map(|t| t.bind(&mut tape, true)).collect();
            let x = tape.constant(images.gather_outer(&idx)?);
            let hw = tape.leaf(nonn.head_w.clone().with_grad());
            let hb = tape.leaf(nonn.head_b.clone().with_grad());
            let f = nonn.forward_on(&mut tape, &tp, (hw, hb), x, Mode::Train)?;
            let mut loss = tape.kd_loss(f.logits, &t_logits.gather_outer(&idx)?, y.as_deref(), h.kd.weights())?;
            for (s, tm) in t_maps.iter().enumerate() {
                let tv = tape.constant(tm.gather_outer(&idx)?);
                let at = tape.at_loss(tv, f.trunk_maps[s])?;
                let at = tape.scale(at, h.gamma as f32)?;
                loss = tape.add(loss, at)?;
            }
            let lv = tape.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("loss became {lv} at epoch {epoch}, batch {b}")));
            }
            if let Some(y) = &y {
                hits += argmax_rows(tape.value(f.logits)).iter().zip(y).filter(|(p, t)| p == t).count();
            }
            loss_sum += lv * idx.len() as f64;
            tape.backward(loss)?;
            for (s, t) in nonn.trunks.iter_mut().enumerate() {
                t.load_grads(&tape, &tp[s])?;
                trunk_opt[s].step(&mut t.params)?;
                t.update_running(&f.batch_stats[s]);
            }
            nonn.head_w.grad = Some(tape.grad(hw).ok_or(Error::MissingGrad(0))?.to_vec());
            nonn.head_b.grad = Some(tape.grad(hb).ok_or(Error::MissingGrad(1))?.to_vec());
            let mut head = [std::mem::replace(&mut nonn.head_w, Tensor::zeros(&[0])), std::mem::replace(&mut nonn.head_b, Tensor::zeros(&[0]))];
            head_opt.step(&mut head)?;
            let [w, hb2] = head;
            nonn.head_w = w;
            nonn.head_b = hb2;
        }
        let acc = if labels.is_some() { hits as f64 / n as f64 } else { f64::NAN };
        hist.push(epoch, "train", loss_sum / n as f64, acc);
        if let Some(ds) = eval {
            let (l, a) = evaluate_nonn(nonn, ds, 256)?;
            hist.push(epoch, "test", l, a);
        }
    }
    Ok(hist)
}

/// Inference-mode logits over all images, in chunks.
pub fn predict_nonn(nonn: &NoNNModel, images: &Tensor<f32>, batch: usize) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(batch.max(1)) {
        parts.push(nonn.forward(&images.slice_outer(start, batch.min(n - start))?)?);
    }
    Tensor::concat_outer(&parts.iter().collect::<Vec<_>>())
}

/// Mean cross-entropy and accuracy.
pub fn evaluate_nonn(nonn: &NoNNModel, ds: &Dataset, batch: usize) -> Result<(f64, f64)> {
    let logits = predict_nonn(nonn, &ds.images, batch)?;
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(logits.clone());
    let ce = tape.softmax_cross_entropy(v, &ds.labels_usize())?;
    Ok((tape.value(ce).item() as f64, accuracy(&logits, &ds.labels)))
}

/// Plain BN student `[(a,2),(b,2),(c,1)]` whose parameter count is closest
/// to `target` (ties go to the smaller network).
pub fn equal_param_student(target: usize, input: InputShape, classes: usize) -> ModelSpec {
    let count = |a: usize, b: usize, c: usize| {
        let conv = |i: usize, o: usize| 9 * i * o + 2 * o;
        conv(input.channels, a) + conv(a, b) + conv(b, c) + c * classes + classes
    };
    let mut best = (usize::MAX, (0, 0, 0));
    for a in 2..=64 {
        for b in a..=4 * a {
            for c in b..=4 * b {
                let d = count(a, b, c).abs_diff(target);
                if d < best.0 {
                    best = (d, (a, b, c));
                }
                if count(a, b, c) > target {
                    break;
                }
            }
        }
    }
    let (a, b, c) = best.1;
    plain_cnn_bn(input, classes, &[(a, 2), (b, 2), (c, 1)])
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    groups: Vec<Vec<usize>>,
    trunks: Vec<String>,
    head_w: Vec<f32>,
    head_b: Vec<f32>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

const MANIFEST_FORMAT: &str = "edgeai-nonn";

/// Writes `manifest.json` and one `trunk_<s>.edpm` per trunk into `dir`.
/// `meta` is copied into the manifest verbatim.
pub fn save_nonn(nonn: &NoNNModel, dir: impl AsRef<Path>, meta: &BTreeMap<String, String>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut trunks = Vec::new();
    for (s, t) in nonn.trunks.iter().enumerate() {
        let name = format!("trunk_{s}.edpm");
        write_model(t, dir.join(&name))?;
        trunks.push(name);
    }
    let m = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        groups: nonn.groups.clone(),
        trunks,
        head_w: nonn.head_w.data().to_vec(),
        head_b: nonn.head_b.data().to_vec(),
        meta: meta.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

pub fn load_nonn(dir: impl AsRef<Path>) -> Result<(NoNNModel, BTreeMap<String, String>)> {
    let dir = dir.as_ref();
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if m.format != MANIFEST_FORMAT || m.version != 1 {
        return Err(Error::InvalidConfig(format!("not a version-1 {MANIFEST_FORMAT} manifest")));
    }
    if m.trunks.len() != m.groups.len() || m.trunks.is_empty() {
        return Err(Error::InvalidConfig("manifest trunk and group lists differ".into()));
    }
    let trunks = m.trunks.iter().map(|f| read_model(dir.join(f))).collect::<Result<Vec<_>>>()?;
    let width: usize = m.groups.iter().map(Vec::len).sum();
    let classes = m.head_b.len();
    for (s, (t, g)) in trunks.iter().zip(&m.groups).enumerate() {
        if t.spec().final_channels()? != g.len() || !t.spec().is_headless() {
            return Err(Error::InvalidSpec(format!("trunk {s} does not end in {} filters", g.len())));
        }
    }
    let nonn = NoNNModel {
        trunks,
        head_w: Tensor::new(&[width, classes], m.head_w)?,
        head_b: Tensor::new(&[classes], m.head_b)?,
        groups: m.groups,
    };
    Ok((nonn, m.meta))
}

#[cfg(test)]
mod tests;
