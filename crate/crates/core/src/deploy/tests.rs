use super::*;
use crate::nonn::TrunkTemplate;
use crate::tensor::Tensor;
use crate::zoo::{plain_cnn, InputShape, Model, WrnConfig, CIFAR_INPUT};

fn two_convs() -> ModelSpec {
    // conv to 64×8×8, then a second conv reading it
    plain_cnn(InputShape::new(3, 8, 8), 10, &[(64, 1), (16, 1)])
}

fn nonn(widths: &[usize]) -> NoNNModel {
    let t = TrunkTemplate::Plain { convs: vec![(4, 2)], batch_norm: true };
    let trunks = widths.iter().map(|&f| Model::build(&t.spec(InputShape::new(3, 8, 8), f), 0).unwrap()).collect();
    let total: usize = widths.iter().sum();
    let mut next = 0;
    let groups = widths
        .iter()
        .map(|&f| {
            next += f;
            (next - f..next).collect()
        })
        .collect();
    NoNNModel { trunks, head_w: Tensor::zeros(&[total, 10]), head_b: Tensor::zeros(&[10]), groups }
}

#[test]
fn single_device_closed_form() {
    let spec = two_convs();
    let p = Profile::rpi_like(1);
    let r = simulate(&plan_single(&spec).unwrap(), &p).unwrap();
    assert_eq!(r.traffic_bytes, 0);
    assert_eq!(r.latency_s, spec.count_flops().unwrap() as f64 / 1e9);
}

#[test]
fn split_boundary_volumes() {
    let spec = two_convs();
    let p = Profile::rpi_like(4);
    let first = |d| plan_layer_split(&spec, d, &p).unwrap().stages[0].transfers.iter().map(|t| t.elements).sum::<u64>();
    assert_eq!(first(2), 4096);
    assert_eq!(first(4), 12288);
    assert_eq!(first(1), 0);
    let plan = plan_layer_split(&spec, 3, &p).unwrap();
    assert_eq!(plan.stages[0].transfers.len(), 6);
}

#[test]
fn split_conserves_work_and_weights() {
    let spec = WrnConfig::new(16, 2).unwrap().spec(CIFAR_INPUT, 10);
    let p = Profile::rpi_like(3);
    for d in 1..=3 {
        let plan = plan_layer_split(&spec, d, &p).unwrap();
        let r = simulate(&plan, &p).unwrap();
        assert_eq!(r.total_flops(), spec.count_flops().unwrap());
        assert_eq!(r.total_params(), spec.count_params().unwrap() as u64);
    }
}

#[test]
fn more_devices_more_traffic_and_bandwidth_helps() {
    let spec = WrnConfig::new(16, 1).unwrap().spec(CIFAR_INPUT, 10);
    let p = Profile::rpi_like(4);
    let traffic: Vec<u64> = (1..=4).map(|d| simulate(&plan_layer_split(&spec, d, &p).unwrap(), &p).unwrap().traffic_bytes).collect();
    assert!(traffic.windows(2).all(|w| w[1] >= w[0]));
    let plan = plan_layer_split(&spec, 2, &p).unwrap();
    let mut fast = p.clone();
    fast.link.bytes_per_sec *= 10.0;
    assert!(simulate(&plan, &fast).unwrap().latency_s <= simulate(&plan, &p).unwrap().latency_s);
}

#[test]
fn nonn_sends_only_pooled_vectors() {
    let p = Profile::rpi_like(3);
    let r = simulate(&plan_nonn(&nonn(&[64, 64]), &p, 1).unwrap(), &p).unwrap();
    assert_eq!((r.traffic_bytes, r.internal_traffic_bytes, r.messages), (64, 0, 1));
    let one = plan_nonn(&nonn(&[8]), &p, 0).unwrap();
    assert_eq!(one.transferred_elements(), 0);
    let three = plan_nonn(&nonn(&[4, 5, 6]), &p, 2).unwrap();
    assert_eq!((three.messages(), three.transferred_elements()), (2, 9));
    assert!(plan_nonn(&nonn(&[4, 4]), &p, 2).is_err());
}

#[test]
fn nonn_plan_conserves() {
    let m = nonn(&[6, 10]);
    let p = Profile::rpi_like(2);
    let r = simulate(&plan_nonn(&m, &p, 0).unwrap(), &p).unwrap();
    assert_eq!(r.total_params(), m.num_params() as u64);
    assert_eq!(r.total_flops(), m.total_flops().unwrap());
}

#[test]
fn oversized_model_is_infeasible() {
    let spec = WrnConfig::new(16, 4).unwrap().spec(CIFAR_INPUT, 10);
    let p = Profile::rpi_like(1);
    let r = simulate(&plan_single(&spec).unwrap(), &p).unwrap();
    assert!(!r.feasible && r.violations[0].starts_with("device 0"));
    assert!(r.require_feasible().is_err());
}

#[test]
fn identical_reports_compare_as_one() {
    let p = Profile::rpi_like(2);
    let r = simulate(&plan_layer_split(&two_convs(), 2, &p).unwrap(), &p).unwrap();
    let rows = compare_report(&[("a".into(), r.clone()), ("b".into(), r)], "a").unwrap();
    let b = &rows[1];
    for g in [b.param_gain, b.flop_gain, b.memory_gain, b.latency_gain, b.energy_gain, b.traffic_gain] {
        assert_eq!(g, 1.0);
    }
    assert_eq!(comparison_csv(&rows).lines().count(), 3);
}

#[test]
fn profile_json() {
    let p = Profile::rpi_like(2);
    assert_eq!(Profile::from_json(&p.to_json().unwrap()).unwrap(), p);
    let extra = p.to_json().unwrap().replacen("\"version\"", "\"colour\": 1, \"version\"", 1);
    assert!(Profile::from_json(&extra).is_err());
}
