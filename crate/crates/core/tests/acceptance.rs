//! Acceptance run: one pass/fail line per criterion. Built without the
//! libtest harness so the lines always reach the console.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{conv2d_naive, exhaustive_max_modularity, gradcheck, modularity_pairs, rng, small_graph_suite, uniform, weighted_sum};
use edgeai::config::RunConfig;
use edgeai::data::{decode_dataset, encode_dataset, Dataset};
use edgeai::deploy::{memory_footprint, Profile};
use edgeai::dream::{kmeans, pca, DreamMetadata};
use edgeai::experiments::{
    desk_datasets, dream_images, dream_metadata, memory_feasibility, nonn_vs_monolithic, partition_teacher, reproduce_fig2d,
    reproduce_table1_counts, split_vs_nonn, train_teacher,
};
use edgeai::fan::{detect_communities, FilterGraph};
use edgeai::nonn::{build_nonn, equal_param_student, taint_check, NoNNModel};
use edgeai::tensor::KdWeights;
use edgeai::zoo::{encode_model, LayerKind, WrnConfig, CIFAR_INPUT};
use edgeai::{Model, Tape, Tensor, Var};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn within(x: f64, reference: f64, tol: f64) -> bool {
    (x - reference).abs() <= tol * reference
}

fn counts() -> Check {
    let t4 = WrnConfig::new(40, 4).unwrap().spec(CIFAR_INPUT, 10);
    let t2 = WrnConfig::new(40, 2).unwrap().spec(CIFAR_INPUT, 10);
    let (p4, p2, f4) = (t4.count_params().unwrap() as f64, t2.count_params().unwrap() as f64, t4.count_flops().unwrap() as f64);
    let student = reproduce_table1_counts().unwrap().into_iter().find(|r| r.item == "nonn2s_student_params").unwrap().measured;
    // gain tolerance from ±5% on both counts
    let gain_tol = 1.05 / 0.95 - 1.0;
    let gain = p4 / student;
    let ok = within(p4, 8.9e6, 0.05) && within(p2, 2.2e6, 0.05) && within(f4, 2.6e9, 0.25) && within(gain, 20.7, gain_tol);
    ensure(ok, format!("WRN40-4 {p4} params, {f4} FLOPs; WRN40-2 {p2}; param gain {gain:.2}x (20.7 ± {:.1}%)", gain_tol * 100.0))
}

fn memory() -> Check {
    let p = Profile::rpi_like(2);
    let rows = memory_feasibility(&p).unwrap();
    let budget = p.devices[0].memory_bytes;
    // a 430K-parameter module at 8 bits, with generous per-tensor overhead
    let plain = memory_footprint(430_000, 64, 8);
    let ok = plain <= budget && rows[0].fits && !rows[1].fits && rows[1].bytes >= 8_900_000;
    ensure(ok, format!("430K@8b = {plain} B, student {} B, WRN40-4 {} B, budget {budget} B", rows[0].bytes, rows[1].bytes))
}

struct Desk {
    cfg: RunConfig,
    train: Dataset,
    test: Dataset,
    teacher: Model,
}

fn fig2d(d: &Desk) -> Check {
    let t = Instant::now();
    let r = reproduce_fig2d(&d.cfg, &d.teacher, &d.train, &d.test).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let [random, dream, alternate, real] = ["random", "dream", "alternate", "real"].map(|s| r.accuracy(s));
    let ok = random < dream && dream >= 0.8 * real && alternate >= dream - 0.03 && secs <= 1800.0;
    ensure(ok, format!("random {random:.4} dream {dream:.4} alternate {alternate:.4} real {real:.4} in {secs:.0} s"))
}

fn split_latency(nonn: &NoNNModel) -> Check {
    let p = Profile::rpi_like(nonn.k());
    let c = split_vs_nonn(nonn, &p).unwrap();
    // expected split traffic from the monolithic layer list
    let mono = equal_param_student(nonn.num_params(), nonn.input(), nonn.classes());
    let layers = mono.layer_summary().unwrap();
    let weights: Vec<usize> = (0..layers.len()).filter(|&i| matches!(layers[i].kind, LayerKind::Conv | LayerKind::Dense)).collect();
    let d = nonn.k() as u64;
    let bytes: u64 = weights.windows(2).map(|w| (d - 1) * layers[w[1] - 1].output.numel() as u64 * p.activation_bits as u64 / 8).sum();
    let ok = c.speedup >= 5.0 && c.nonn.internal_traffic_bytes == 0 && c.split.traffic_bytes == bytes;
    ensure(
        ok,
        format!(
            "speedup {:.2}x, NoNN pre-final traffic {} B, split traffic {} B (expected {bytes} B)",
            c.speedup, c.nonn.internal_traffic_bytes, c.split.traffic_bytes
        ),
    )
}

fn nonn_accuracy(d: &Desk) -> Check {
    let t = Instant::now();
    let (_, c) = nonn_vs_monolithic(&d.cfg, &d.teacher, &d.train, &d.test).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let ok = c.nonn_accuracy >= c.monolithic_accuracy - 0.02 && secs <= 1200.0;
    ensure(
        ok,
        format!(
            "NoNN {:?} ({} params) {:.4} vs monolithic ({} params) {:.4} in {secs:.0} s",
            c.widths, c.nonn_params, c.nonn_accuracy, c.monolithic_params, c.monolithic_accuracy
        ),
    )
}

fn nudge(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v.abs() < 0.02 { v + 0.02f64.copysign(v) } else { v })
}

fn oracles() -> Check {
    const CASES: u64 = 20;
    let mut worst: f64 = 0.0;
    let mut per_layer = Vec::new();
    let mut note = |name: &str, errs: Vec<f64>| {
        let m = errs.iter().fold(0.0f64, |a, &b| a.max(b));
        worst = worst.max(m);
        per_layer.push(format!("{name} {}", errs.len()));
    };
    let check = |inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var| gradcheck(&inputs, 1e-5, |t, v| (f(t, v), vec![])).max_rel_err;

    note("conv2d", (0..CASES).map(|s| {
        let mut g = rng(s);
        let (c, k, h) = (1 + s as usize % 3, 1 + s as usize % 2, 3 + s as usize % 4);
        let (stride, pad) = (1 + s as usize % 2, s as usize % 2);
        check(vec![uniform(&mut g, &[2, c, h, h + 1], -1.0, 1.0), uniform(&mut g, &[k, c, 3, 2], -1.0, 1.0), uniform(&mut g, &[k], -1.0, 1.0)], &|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
            weighted_sum(t, y, s)
        })
    }).collect());
    note("dense", (0..CASES).map(|s| {
        let mut g = rng(100 + s);
        let (n, i, o) = (1 + s as usize % 3, 1 + s as usize % 5, 1 + s as usize % 4);
        check(vec![uniform(&mut g, &[n, i], -1.0, 1.0), uniform(&mut g, &[i, o], -1.0, 1.0), uniform(&mut g, &[o], -1.0, 1.0)], &|t, v| {
            let y = t.dense(v[0], v[1], Some(v[2])).unwrap();
            weighted_sum(t, y, s)
        })
    }).collect());
    note("relu", (0..CASES).map(|s| {
        let mut g = rng(200 + s);
        check(vec![nudge(uniform(&mut g, &[2, 3, 2 + s as usize % 3], -1.0, 1.0))], &|t, v| {
            let y = t.relu(v[0]).unwrap();
            weighted_sum(t, y, s)
        })
    }).collect());
    note("global_avg_pool", (0..CASES).map(|s| {
        let mut g = rng(300 + s);
        check(vec![uniform(&mut g, &[2, 1 + s as usize % 3, 2 + s as usize % 3, 3], -1.0, 1.0)], &|t, v| {
            let y = t.global_avg_pool(v[0]).unwrap();
            weighted_sum(t, y, s)
        })
    }).collect());
    note("batch_norm", (0..CASES).map(|s| {
        let mut g = rng(400 + s);
        let c = 1 + s as usize % 3;
        check(vec![uniform(&mut g, &[3, c, 2, 2], -1.0, 1.0), uniform(&mut g, &[c], 0.5, 1.5), uniform(&mut g, &[c], -0.5, 0.5)], &|t, v| {
            let (y, _, _) = t.batch_norm(v[0], v[1], v[2], None, 1e-5).unwrap();
            weighted_sum(t, y, s)
        })
    }).collect());
    note("softmax_cross_entropy", (0..CASES).map(|s| {
        let mut g = rng(500 + s);
        let (n, l) = (1 + s as usize % 4, 2 + s as usize % 5);
        let labels: Vec<usize> = (0..n).map(|_| g.random_range(0..l)).collect();
        check(vec![uniform(&mut g, &[n, l], -3.0, 3.0)], &|t, v| t.softmax_cross_entropy(v[0], &labels).unwrap())
    }).collect());
    note("kd_loss", (0..CASES).map(|s| {
        let mut g = rng(600 + s);
        let (n, l) = (1 + s as usize % 4, 2 + s as usize % 5);
        let labels: Vec<usize> = (0..n).map(|_| g.random_range(0..l)).collect();
        let teacher = uniform(&mut g, &[n, l], -3.0, 3.0);
        let w = KdWeights { alpha: g.random_range(0.0..1.0), tau: g.random_range(0.5..6.0) };
        check(vec![uniform(&mut g, &[n, l], -3.0, 3.0)], &|t, v| t.kd_loss(v[0], &teacher, Some(&labels), w).unwrap())
    }).collect());
    note("at_loss", (0..CASES).map(|s| {
        let mut g = rng(700 + s);
        let h = 1 + s as usize % 4;
        check(vec![uniform(&mut g, &[2, 1 + s as usize % 4, h, h + 1], -1.0, 1.0), uniform(&mut g, &[2, 1 + s as usize % 3, h, h + 1], -1.0, 1.0)], &|t, v| {
            t.at_loss(v[0], v[1]).unwrap()
        })
    }).collect());

    let mut conv_exact = true;
    for s in 0..CASES {
        let mut g = rng(800 + s);
        let (stride, pad) = (1 + s as usize % 2, s as usize % 2);
        let x = uniform(&mut g, &[2, 3, 7, 6], -1.0, 1.0);
        let w = uniform(&mut g, &[4, 3, 3, 3], -1.0, 1.0);
        let b = uniform(&mut g, &[4], -1.0, 1.0);
        let mut t = Tape::<f64>::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        conv_exact &= t.value(y).data() == conv2d_naive(&x, &w, Some(&b), stride, pad).data();
    }

    let mut worst_ratio = f64::INFINITY;
    for (n, edges) in small_graph_suite() {
        let mut w = vec![0.0; n * n];
        for &(i, j, x) in &edges {
            w[i * n + j] += x;
            w[j * n + i] += x;
        }
        let p = detect_communities(&FilterGraph::from_weights(n, w, vec![1.0; n]).unwrap(), 1.0, 7).unwrap();
        let best = exhaustive_max_modularity(n, &edges);
        if best > 0.0 {
            worst_ratio = worst_ratio.min(modularity_pairs(n, &edges, &p.community) / best);
        }
    }

    let mut km_monotone = true;
    for s in 0..20u64 {
        let mut g = rng(900 + s);
        let pts: Vec<f64> = (0..120).map(|_| g.random_range(-3.0..3.0)).collect();
        let km = kmeans(&pts, 3, 1 + s as usize % 6, s, 100).unwrap();
        km_monotone &= km.objective.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
    }

    let mut pca_residual: f64 = 0.0;
    for s in 0..10u64 {
        let mut g = rng(1000 + s);
        let dim = 3 + s as usize % 6;
        let m = 30;
        let pts: Vec<f64> = (0..m * dim).map(|i| g.random_range(-1.0..1.0) * (1 + i % dim) as f64).collect();
        let mean: Vec<f64> = (0..dim).map(|d| (0..m).map(|i| pts[i * dim + d]).sum::<f64>() / m as f64).collect();
        let cov = |a: usize, b: usize| (0..m).map(|i| (pts[i * dim + a] - mean[a]) * (pts[i * dim + b] - mean[b])).sum::<f64>() / (m - 1) as f64;
        let norm = (0..dim * dim).map(|i| cov(i / dim, i % dim).powi(2)).sum::<f64>().sqrt();
        let p = pca(&pts, dim, dim).unwrap();
        for (v, sd) in p.components.iter().zip(&p.stds) {
            let r = (0..dim).map(|a| ((0..dim).map(|b| cov(a, b) * v[b]).sum::<f64>() - sd * sd * v[a]).powi(2)).sum::<f64>().sqrt();
            pca_residual = pca_residual.max(r / norm);
        }
    }

    let ok = worst < 1e-4 && conv_exact && worst_ratio >= 0.95 && km_monotone && pca_residual <= 1e-8;
    ensure(
        ok,
        format!(
            "FD max rel err {worst:.2e} over [{}]; conv exact {conv_exact}; Louvain/optimum ≥ {worst_ratio:.4}; kmeans monotone {km_monotone}; PCA residual {pca_residual:.1e}",
            per_layer.join(", ")
        ),
    )
}

fn tiny_config() -> RunConfig {
    RunConfig::from_json(
        r#"{
        "dataset": {"classes": 3, "train_per_class": 20, "test_per_class": 6, "size": 16},
        "teacher": {"arch": {"type": "plain", "convs": [[8, 2], [8, 1]], "batch_norm": true}, "train": {"epochs": 2, "batch": 16, "lr": 0.05}},
        "dream": {"fraction": 0.5, "k": 2, "p": 2, "n_per_cluster": 2, "synth": {"steps": 4, "batch": 8}},
        "nonn": {"template": {"type": "plain", "convs": [[4, 2]], "batch_norm": true}, "train": {"epochs": 1, "batch": 16, "lr": 0.05}},
        "seed": 12
    }"#,
    )
    .unwrap()
}

/// Every artifact of a small pipeline, serialised.
fn tiny_pipeline(cfg: &RunConfig) -> Vec<Vec<u8>> {
    let (train, test) = desk_datasets(cfg).unwrap();
    let (teacher, hist) = train_teacher(cfg, &train, &test).unwrap();
    let meta = dream_metadata(cfg, &teacher, &train).unwrap();
    let syn = dream_images(cfg, &teacher, &meta).unwrap();
    let (g, _, part) = partition_teacher(cfg, &teacher, &train).unwrap();
    let nonn = build_nonn(&teacher, &part, &cfg.nonn).unwrap();
    vec![
        encode_dataset(&train).unwrap(),
        encode_model(&teacher),
        hist.to_csv().into_bytes(),
        meta.to_json().unwrap().into_bytes(),
        encode_dataset(&syn.data).unwrap(),
        g.to_json().unwrap().into_bytes(),
        part.to_json().unwrap().into_bytes(),
        nonn.fingerprint().into_bytes(),
    ]
}

fn structural(nonn: &NoNNModel) -> Check {
    let taint = taint_check(nonn).unwrap();

    // metadata layout does not grow with the number of images summarised
    let cfg = tiny_config();
    let (train, test) = desk_datasets(&cfg).unwrap();
    let (teacher, _) = train_teacher(&cfg, &train, &test).unwrap();
    let mut keys_ok = true;
    let mut bounded = true;
    let mut budgets = Vec::new();
    for fraction in [0.5, 1.0] {
        let mut c = cfg.clone();
        c.dream.fraction = fraction;
        let meta = dream_metadata(&c, &teacher, &train).unwrap();
        let v: serde_json::Value = serde_json::from_str(&meta.to_json().unwrap()).unwrap();
        let top: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys_ok &= top == ["channels", "classes", "clusters", "k", "p", "teacher_fingerprint"];
        for cl in v["clusters"].as_array().unwrap() {
            let ck: Vec<&str> = cl.as_object().unwrap().keys().map(String::as_str).collect();
            keys_ok &= ck == ["centroid", "class", "components", "count", "stds"];
        }
        // every stored array is sized by C or p, never by the image count
        bounded &= meta.clusters.len() == meta.k * meta.classes
            && meta.clusters.iter().all(|cl| {
                cl.centroid.len() == meta.channels
                    && cl.components.len() <= meta.p
                    && cl.stds.len() == cl.components.len()
                    && cl.components.iter().all(|v| v.len() == meta.channels)
            })
            && meta.stored_scalars() <= meta.scalar_budget();
        budgets.push(meta.scalar_budget());
        DreamMetadata::from_json(&meta.to_json().unwrap()).unwrap();
    }
    let schema_ok = keys_ok && bounded && budgets[0] == budgets[1];

    let bytes = encode_dataset(&train).unwrap();
    let round_trip = encode_dataset(&decode_dataset(&bytes).unwrap()).unwrap() == bytes;
    let mut g = rng(77);
    let mut rejected = 0;
    let trials = 200;
    for _ in 0..trials {
        let mut b = bytes.clone();
        let i = g.random_range(0..b.len());
        b[i] ^= 1 << g.random_range(0..8);
        if g.random::<bool>() {
            b.truncate(g.random_range(0..b.len()));
        }
        rejected += usize::from(decode_dataset(&b).is_err());
    }

    let same = tiny_pipeline(&cfg) == tiny_pipeline(&cfg);
    let ok = taint.isolated() && schema_ok && round_trip && rejected == trials && same;
    ensure(
        ok,
        format!(
            "taint isolated {}; metadata keys {keys_ok}, sizes bounded by C and p {bounded}; EDAI round trip {round_trip}, fuzz rejected {rejected}/{trials}; byte-identical rerun {same}",
            taint.isolated()
        ),
    )
}

fn run(name: &str, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let secs = t.elapsed().as_secs_f64();
    match out {
        Ok(m) => {
            println!("PASS  {name}: {m} [{secs:.1} s]");
            true
        }
        Err(m) => {
            println!("FAIL  {name}: {m} [{secs:.1} s]");
            false
        }
    }
}

/// Criterion numbers given on the command line restrict the run, e.g.
/// `cargo test --test acceptance -- 6 7`.
fn main() {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: &str| only.is_empty() || only.iter().any(|a| a == n);
    let mut ok = true;
    if wanted("1") {
        ok &= run("criterion 1, parameter and FLOP counts", counts);
    }
    if wanted("2") {
        ok &= run("criterion 2, memory feasibility", memory);
    }
    if ["3", "4", "5", "7"].iter().any(|n| wanted(n)) {
        let cfg = RunConfig::default();
        let (train, test) = desk_datasets(&cfg).unwrap();
        let (teacher, _) = train_teacher(&cfg, &train, &test).unwrap();
        let desk = Desk { cfg, train, test, teacher };
        let (_, _, part) = partition_teacher(&desk.cfg, &desk.teacher, &desk.train).unwrap();
        let nonn = build_nonn(&desk.teacher, &part, &desk.cfg.nonn).unwrap();
        if wanted("3") {
            ok &= run("criterion 3, transfer-set ordering", || fig2d(&desk));
        }
        if wanted("4") {
            ok &= run("criterion 4, NoNN vs layer split latency and traffic", || split_latency(&nonn));
        }
        if wanted("5") {
            ok &= run("criterion 5, NoNN accuracy vs equal-size student", || nonn_accuracy(&desk));
        }
        if wanted("6") {
            ok &= run("criterion 6, oracle equivalences", oracles);
        }
        if wanted("7") {
            ok &= run("criterion 7, structural invariants", || structural(&nonn));
        }
    } else if wanted("6") {
        ok &= run("criterion 6, oracle equivalences", oracles);
    }
    if !ok {
        std::process::exit(1);
    }
}
