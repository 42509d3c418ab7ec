//! End-to-end desk pipelines and the analytic count checks.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{gen_shapes, Dataset, MotifSet};
use crate::deploy::{memory_footprint, plan_layer_split, plan_nonn, simulate, CostReport, Profile};
use crate::distill::{evaluate, train_kd, train_supervised, History, KdHyper};
use crate::dream::{extract_metadata, gen_targets, synthesize_images, DreamMetadata, SyntheticSet};
use crate::error::Result;
use crate::fan::{balance_partitions, build_fan, detect_communities, FilterGraph, Partition};
use crate::nonn::{build_nonn, equal_param_student, evaluate_nonn, train_nonn, NoNNModel, TrunkTemplate};
use crate::tensor::{Real, Tensor};
use crate::zoo::{InputShape, Model, WrnConfig, CIFAR_INPUT};

/// Training and test splits of the configured shapes dataset.
pub fn desk_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    Ok((gen_shapes(&cfg.dataset.shapes(cfg.seed, false))?, gen_shapes(&cfg.dataset.shapes(cfg.seed, true))?))
}

pub fn train_teacher(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<(Model, History)> {
    let h = cfg.seeded(&cfg.teacher.train, 1);
    let mut m = Model::build(&cfg.teacher_spec()?, h.seed)?;
    let hist = train_supervised(&mut m, train, Some(test), &h)?;
    Ok((m, hist))
}

/// `n` images of independent uniform `[0,1]` pixels.
pub fn random_images(n: usize, input: InputShape, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, input.channels, input.height, input.width], |_| rng.random::<f32>())
}

pub fn dream_metadata(cfg: &RunConfig, teacher: &Model, train: &Dataset) -> Result<DreamMetadata> {
    let d = &cfg.dream;
    extract_metadata(teacher, train, d.fraction, d.k, d.p, cfg.seed)
}

pub fn dream_images(cfg: &RunConfig, teacher: &Model, meta: &DreamMetadata) -> Result<SyntheticSet> {
    let d = &cfg.dream.hyper;
    let synth = crate::dream::SynthHyper { seed: cfg.seed, ..d.synth.clone() };
    let targets = gen_targets(meta, d.n_per_cluster, d.noise_scale, cfg.seed)?;
    synthesize_images(teacher, &targets, &synth)
}

/// Unlabelled distillation of a fresh student over `images`; returns the
/// test accuracy.
pub fn kd_student_accuracy(cfg: &RunConfig, teacher: &Model, images: &Tensor<f32>, test: &Dataset) -> Result<f64> {
    let h = cfg.seeded(&cfg.student.train, 2);
    let mut s = Model::build(&cfg.student_spec()?, h.seed)?;
    let kd = KdHyper { alpha: 1.0, ..cfg.kd };
    train_kd(&mut s, teacher, images, None, &h, &kd, None)?;
    Ok(evaluate(&s, test, 256)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig2dRow {
    pub source: String,
    pub images: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig2dVerdict {
    pub random_below_dream: bool,
    /// `dream / real`; must be at least 0.8.
    pub dream_over_real: f64,
    /// `alternate − dream` in points; must be at least −3.
    pub alternate_minus_dream: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig2dReport {
    pub teacher_accuracy: f64,
    pub rows: Vec<Fig2dRow>,
    pub verdict: Fig2dVerdict,
}

impl Fig2dReport {
    pub fn accuracy(&self, source: &str) -> f64 {
        self.rows.iter().find(|r| r.source == source).map_or(f64::NAN, |r| r.accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("source,transfer_images,test_accuracy\n");
        for r in &self.rows {
            writeln!(s, "{},{},{:.4}", r.source, r.images, r.accuracy).expect("string write");
        }
        let v = &self.verdict;
        writeln!(s, "# random<dream={} dream/real={:.4} alternate-dream={:+.2}pt pass={}", v.random_below_dream, v.dream_over_real, v.alternate_minus_dream, v.pass)
            .expect("string write");
        s
    }
}

pub fn fig2d_verdict(random: f64, dream: f64, alternate: f64, real: f64) -> Fig2dVerdict {
    let random_below_dream = random < dream;
    let dream_over_real = dream / real;
    let alternate_minus_dream = 100.0 * (alternate - dream);
    Fig2dVerdict {
        random_below_dream,
        dream_over_real,
        alternate_minus_dream,
        pass: random_below_dream && dream_over_real >= 0.8 && alternate_minus_dream >= -3.0,
    }
}

/// Four students distilled from the same teacher, identical except for
/// the transfer images: uniform noise, dream images synthesised from
/// cluster metadata, images from a different motif family, and the real
/// training images.
pub fn reproduce_fig2d(cfg: &RunConfig, teacher: &Model, train: &Dataset, test: &Dataset) -> Result<Fig2dReport> {
    let meta = dream_metadata(cfg, teacher, train)?;
    let dream = dream_images(cfg, teacher, &meta)?;
    let n = dream.data.len();
    let input = cfg.dataset.input();
    let alt_cfg = {
        let mut c = cfg.dataset.shapes(cfg.seed.wrapping_add(7), false);
        c.motifs = MotifSet::Alternate;
        c.per_class = split_even(n, cfg.dataset.classes);
        c
    };
    let alternate = gen_shapes(&alt_cfg)?;
    let sets: [(&str, Tensor<f32>); 4] = [
        ("random", random_images(n, input, cfg.seed.wrapping_add(11))),
        ("dream", dream.data.images.clone()),
        ("alternate", alternate.images),
        ("real", train.images.clone()),
    ];
    let mut rows = Vec::new();
    for (source, images) in sets {
        let accuracy = kd_student_accuracy(cfg, teacher, &images, test)?;
        rows.push(Fig2dRow { source: source.into(), images: images.shape()[0], accuracy });
    }
    let acc = |i: usize| rows[i].accuracy;
    let verdict = fig2d_verdict(acc(0), acc(1), acc(2), acc(3));
    Ok(Fig2dReport { teacher_accuracy: evaluate(teacher, test, 256)?.1, rows, verdict })
}

fn split_even(n: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| n / parts + usize::from(i < n % parts)).collect()
}

/// Filter graph over the training set, detected communities, and the
/// partition balanced to the configured device count.
pub fn partition_teacher(cfg: &RunConfig, teacher: &Model, train: &Dataset) -> Result<(FilterGraph, Partition, Partition)> {
    let g = build_fan(teacher, train)?;
    let raw = detect_communities(&g, cfg.fan.resolution, cfg.seed)?;
    let k = cfg.fan.k_devices;
    let budget = cfg.fan.budget_filters.unwrap_or_else(|| g.len().div_ceil(k));
    let balanced = balance_partitions(&g, &raw, k, budget)?;
    Ok((g, raw, balanced))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoNNComparison {
    pub nonn_accuracy: f64,
    pub monolithic_accuracy: f64,
    pub nonn_params: usize,
    pub monolithic_params: usize,
    pub widths: Vec<usize>,
    pub modularity: f64,
    /// `nonn ≥ monolithic − 2 points`.
    pub pass: bool,
}

/// NoNN student over the balanced partition against a single KD student of
/// (nearly) the same total parameter count, both trained with the same
/// schedule and KD settings.
pub fn nonn_vs_monolithic(cfg: &RunConfig, teacher: &Model, train: &Dataset, test: &Dataset) -> Result<(NoNNModel, NoNNComparison)> {
    let (_, _, part) = partition_teacher(cfg, teacher, train)?;
    let mut h = cfg.nonn.clone();
    h.train = cfg.seeded(&cfg.nonn.train, 3);
    let mut nonn = build_nonn(teacher, &part, &h)?;
    train_nonn(teacher, &mut nonn, &train.images, Some(&train.labels), &h, None)?;
    let nonn_accuracy = evaluate_nonn(&nonn, test, 256)?.1;

    let mono_spec = equal_param_student(nonn.num_params(), cfg.dataset.input(), cfg.dataset.classes);
    let mh = cfg.seeded(&cfg.nonn.train, 4);
    let mut mono = Model::build(&mono_spec, mh.seed)?;
    train_kd(&mut mono, teacher, &train.images, Some(&train.labels), &mh, &h.kd, None)?;
    let monolithic_accuracy = evaluate(&mono, test, 256)?.1;
    let cmp = NoNNComparison {
        nonn_accuracy,
        monolithic_accuracy,
        nonn_params: nonn.num_params(),
        monolithic_params: mono.num_params(),
        widths: nonn.widths(),
        modularity: part.modularity,
        pass: nonn_accuracy >= monolithic_accuracy - 0.02,
    };
    Ok((nonn, cmp))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitComparison {
    pub nonn: CostReport,
    pub split: CostReport,
    pub monolithic_params: usize,
    /// `split latency / nonn latency`.
    pub speedup: f64,
}

/// NoNN plan (aggregator 0) against a `k`-way layer split of a plain
/// student with the same total parameter count.
pub fn split_vs_nonn<T: Real>(nonn: &NoNNModel<T>, profile: &Profile) -> Result<SplitComparison> {
    let mono = equal_param_student(nonn.num_params(), nonn.input(), nonn.classes());
    let nonn_r = simulate(&plan_nonn(nonn, profile, 0)?, profile)?;
    let split_r = simulate(&plan_layer_split(&mono, nonn.k(), profile)?, profile)?;
    Ok(SplitComparison { speedup: split_r.latency_s / nonn_r.latency_s, nonn: nonn_r, split: split_r, monolithic_params: mono.count_params()? })
}

/// Trunk template of one paper-scale NoNN student: a WRN-10 with group
/// widths 48, 96 and the partition size.
pub fn paper_nonn_template() -> TrunkTemplate {
    TrunkTemplate::Wrn { blocks: 1, widths: [48, 96], stem: 16 }
}

/// An analytic reference value with its tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub item: String,
    pub measured: f64,
    pub reference: f64,
    /// Allowed relative deviation.
    pub tolerance: f64,
    pub pass: bool,
}

impl CountRow {
    fn new(item: &str, measured: f64, reference: f64, tolerance: f64) -> Self {
        Self { item: item.into(), measured, reference, tolerance, pass: (measured / reference - 1.0).abs() <= tolerance }
    }
}

pub fn counts_csv(rows: &[CountRow]) -> String {
    let mut s = String::from("item,measured,reference,tolerance,pass\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.item, r.measured, r.reference, r.tolerance, r.pass).expect("string write");
    }
    s
}

/// Parameter and FLOP counts of the CIFAR-10 teachers and of one NoNN-2S
/// student (trunk over half of WRN40-4's 256 final filters plus its head
/// slice and the head bias), with the gains between them. Gain tolerances
/// follow from the count tolerances: `(1+a)/(1−b) − 1`.
pub fn reproduce_table1_counts() -> Result<Vec<CountRow>> {
    let t4 = WrnConfig::new(40, 4)?.spec(CIFAR_INPUT, 10);
    let t2 = WrnConfig::new(40, 2)?.spec(CIFAR_INPUT, 10);
    let half = t4.final_channels()? / 2;
    let trunk = paper_nonn_template().spec(CIFAR_INPUT, half);
    let student_params = trunk.count_params()? + half * 10 + 10;
    let student_flops = trunk.count_flops()? + 2 * (2 * half * 10) as u64;
    let (p4, f4) = (t4.count_params()? as f64, t4.count_flops()? as f64);
    let (pt, ft) = (0.05, 0.25);
    Ok(vec![
        CountRow::new("wrn40_4_params", p4, 8.9e6, pt),
        CountRow::new("wrn40_2_params", t2.count_params()? as f64, 2.2e6, pt),
        CountRow::new("wrn40_4_flops", f4, 2.6e9, ft),
        CountRow::new("nonn2s_student_params", student_params as f64, 0.43e6, pt),
        CountRow::new("nonn2s_student_flops", student_flops as f64, 167e6, ft),
        CountRow::new("param_gain", p4 / student_params as f64, 20.7, (1.0 + pt) / (1.0 - pt) - 1.0),
        CountRow::new("flop_gain", f4 / student_flops as f64, 15.5, (1.0 + ft) / (1.0 - ft) - 1.0),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub item: String,
    pub params: u64,
    pub bytes: u64,
    pub budget: u64,
    pub fits: bool,
}

/// Footprints at the profile's weight width of one paper-scale NoNN-2S
/// student (trunk, head slice and bias) and of WRN40-4, against one
/// device's memory.
pub fn memory_feasibility(profile: &Profile) -> Result<Vec<MemoryRow>> {
    let budget = profile.devices[0].memory_bytes;
    let t4 = WrnConfig::new(40, 4)?.spec(CIFAR_INPUT, 10);
    let count_tensors = |s: &crate::zoo::ModelSpec| -> Result<u64> { Ok(s.layer_summary()?.iter().map(|l| l.tensors as u64).sum()) };
    let half = t4.final_channels()? / 2;
    let trunk = paper_nonn_template().spec(CIFAR_INPUT, half);
    let student = (trunk.count_params()? + half * 10 + 10) as u64;
    let row = |item: &str, params: u64, tensors: u64| {
        let bytes = memory_footprint(params, tensors, profile.weight_bits);
        MemoryRow { item: item.into(), params, bytes, budget, fits: bytes <= budget }
    };
    Ok(vec![row("nonn2s_student", student, count_tensors(&trunk)? + 2), row("wrn40_4", t4.count_params()? as u64, count_tensors(&t4)?)])
}
