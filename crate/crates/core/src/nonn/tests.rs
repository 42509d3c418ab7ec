use super::*;
use crate::data::{gen_shapes, MotifSet, ShapesConfig};
use crate::fan::FilterGraph;

fn tiny_teacher() -> Model {
    Model::build(&plain_cnn_bn(InputShape::new(3, 16, 16), 4, &[(6, 2), (8, 1)]), 1).unwrap()
}

fn halves(n: usize, k: usize) -> Partition {
    let g = FilterGraph::from_weights(n, vec![0.0; n * n], vec![1.0; n]).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i * k / n).collect();
    Partition::new(&g, &labels).unwrap()
}

fn hyper() -> NoNNHyper {
    NoNNHyper {
        template: TrunkTemplate::Plain { convs: vec![(4, 2)], batch_norm: true },
        train: TrainHyper { epochs: 2, batch: 8, ..TrainHyper::default() },
        ..NoNNHyper::default()
    }
}

fn data() -> Dataset {
    let mut cfg = ShapesConfig::new(MotifSet::Primary, 4, 6, 0.05, 3);
    cfg.size = 16;
    gen_shapes(&cfg).unwrap()
}

#[test]
fn widths_follow_partition() {
    let nonn = build_nonn(&tiny_teacher(), &halves(8, 2), &hyper()).unwrap();
    assert_eq!(nonn.widths(), vec![4, 4]);
    assert_eq!(nonn.head_w.shape(), &[8, 4]);
    let (_, feats) = infer_nonn(&nonn, &data().images.slice_outer(0, 3).unwrap()).unwrap();
    assert_eq!(feats.iter().map(|f| f.shape()[1]).collect::<Vec<_>>(), vec![4, 4]);
}

#[test]
fn taint_proves_isolation() {
    let nonn = build_nonn(&tiny_teacher(), &halves(8, 3), &hyper()).unwrap();
    let r = taint_check(&nonn).unwrap();
    assert!(r.isolated(), "{r:?}");
}

#[test]
fn single_trunk_is_plain_student() {
    let nonn = build_nonn(&tiny_teacher(), &halves(8, 1), &hyper()).unwrap();
    assert_eq!(nonn.k(), 1);
    assert_eq!(nonn.device_params(0), nonn.num_params());
}

#[test]
fn budget_violation_names_trunk() {
    // trunk 0 holds 268 trunk weights, 16 head weights and 4 head biases
    let h = NoNNHyper { param_budget: 288, ..hyper() };
    match build_nonn(&tiny_teacher(), &halves(8, 2), &h).err() {
        Some(Error::BudgetViolation { trunk: 0, params: 288, limit: 288 }) => {}
        other => panic!("{other:?}"),
    }
    assert!(build_nonn(&tiny_teacher(), &halves(8, 2), &NoNNHyper { param_budget: 289, ..hyper() }).is_ok());
}

#[test]
fn split_evaluation_matches_whole_at_f64() {
    let nonn = build_nonn(&tiny_teacher(), &halves(8, 2), &hyper()).unwrap().cast::<f64>();
    let x = data().images.slice_outer(0, 5).unwrap().cast::<f64>();
    let whole = nonn.forward(&x).unwrap();
    let (logits, feats) = infer_nonn(&nonn, &x).unwrap();
    assert_eq!(whole.data(), logits.data());
    // trunk 1 first, then trunk 0
    let late = nonn.trunk_features(1, &x).unwrap();
    let early = nonn.trunk_features(0, &x).unwrap();
    assert_eq!(nonn.head_logits(&[early, late]).unwrap().data(), whole.data());
    let zeroed = Tensor::zeros(feats[1].shape());
    assert_ne!(nonn.head_logits(&[feats[0].clone(), zeroed]).unwrap().data(), whole.data());
}

#[test]
fn training_leaves_teacher_alone_and_is_deterministic() {
    let teacher = tiny_teacher();
    let before = teacher.fingerprint();
    let ds = data();
    let run = || {
        let mut m = build_nonn(&teacher, &halves(8, 2), &hyper()).unwrap();
        train_nonn(&teacher, &mut m, &ds.images, Some(&ds.labels), &hyper(), None).unwrap();
        m.fingerprint()
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(teacher.fingerprint(), before);
}

#[test]
fn manifest_round_trip() {
    let nonn = build_nonn(&tiny_teacher(), &halves(8, 2), &hyper()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let meta = BTreeMap::from([("config_hash".to_string(), "abc".to_string())]);
    save_nonn(&nonn, dir.path(), &meta).unwrap();
    let (back, m) = load_nonn(dir.path()).unwrap();
    assert_eq!(back.fingerprint(), nonn.fingerprint());
    assert_eq!(m, meta);
}

#[test]
fn equal_param_search_is_close() {
    let spec = equal_param_student(12_826, InputShape::new(3, 32, 32), 10);
    let p = spec.count_params().unwrap();
    assert!(p.abs_diff(12_826) * 50 < 12_826, "{p}");
}
