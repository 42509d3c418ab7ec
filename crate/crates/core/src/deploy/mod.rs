//! Analytic cost model for running a network on one or more small devices.

mod quant;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nonn::NoNNModel;
use crate::tensor::Real;
use crate::zoo::{LayerKind, ModelSpec, Shape};

pub use quant::{dequantize, memory_footprint, quantize, Quantized};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: usize,
    pub memory_bytes: u64,
    pub flops_per_sec: f64,
    pub joules_per_flop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub bytes_per_sec: f64,
    /// Fixed cost of each point-to-point message, seconds.
    pub message_latency: f64,
    pub joules_per_byte: f64,
}

/// Device/link topology file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub version: u32,
    pub devices: Vec<DeviceSpec>,
    pub link: LinkSpec,
    pub weight_bits: u32,
    pub activation_bits: u32,
}

pub const PROFILE_VERSION: u32 = 1;

impl Profile {
    /// `n` identical boards: 500 KB, 1 GFLOP/s, 5 nJ per FLOP, joined by
    /// 1 MB/s wires with 1 ms per message and 50 nJ per byte; 8-bit weights
    /// and activations.
    pub fn rpi_like(n: usize) -> Self {
        Self {
            version: PROFILE_VERSION,
            devices: (0..n)
                .map(|id| DeviceSpec { id, memory_bytes: 500_000, flops_per_sec: 1e9, joules_per_flop: 5e-9 })
                .collect(),
            link: LinkSpec { bytes_per_sec: 1e6, message_latency: 1e-3, joules_per_byte: 5e-8 },
            weight_bits: 8,
            activation_bits: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != PROFILE_VERSION {
            return Err(Error::UnsupportedVersion(self.version as u16));
        }
        if self.devices.is_empty() {
            return Err(Error::InvalidConfig("profile lists no devices".into()));
        }
        for (i, d) in self.devices.iter().enumerate() {
            if d.id != i {
                return Err(Error::InvalidConfig(format!("device {i} has id {}; ids must be 0..n in order", d.id)));
            }
            if d.memory_bytes == 0 || !(d.flops_per_sec > 0.0) || !(d.joules_per_flop > 0.0) {
                return Err(Error::InvalidConfig(format!("device {i} needs positive memory, throughput and energy")));
            }
        }
        let l = &self.link;
        if !(l.bytes_per_sec > 0.0) || !(l.message_latency >= 0.0) || !(l.joules_per_byte >= 0.0) {
            return Err(Error::InvalidConfig("link needs positive bandwidth and non-negative costs".into()));
        }
        for b in [self.weight_bits, self.activation_bits] {
            if b == 0 || b > 32 {
                return Err(Error::InvalidConfig(format!("bit width {b} out of range")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Strategy {
    Single,
    LayerSplit { d: usize },
    Nonn { k: usize, aggregator: usize },
}

/// Parameters placed on one device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub device: usize,
    pub params: u64,
    pub tensors: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub from: usize,
    pub to: usize,
    pub elements: u64,
}

/// Transfers feeding the classifier are `final`; everything earlier is
/// `internal`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Internal,
    Final,
}

/// Compute on every device, then the transfers that follow it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub label: String,
    pub flops: Vec<u64>,
    pub transfers: Vec<Transfer>,
    pub boundary: Boundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub strategy: Strategy,
    pub devices: usize,
    pub groups: Vec<ParamGroup>,
    pub stages: Vec<Stage>,
}

impl DeploymentPlan {
    pub fn params_on(&self, device: usize) -> u64 {
        self.groups.iter().filter(|g| g.device == device).map(|g| g.params).sum()
    }

    pub fn tensors_on(&self, device: usize) -> u64 {
        self.groups.iter().filter(|g| g.device == device).map(|g| g.tensors).sum()
    }

    pub fn flops_on(&self, device: usize) -> u64 {
        self.stages.iter().map(|s| s.flops[device]).sum()
    }

    pub fn transferred_elements(&self) -> u64 {
        self.stages.iter().flat_map(|s| &s.transfers).map(|t| t.elements).sum()
    }

    pub fn messages(&self) -> usize {
        self.stages.iter().map(|s| s.transfers.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        for s in &self.stages {
            if s.flops.len() != self.devices {
                return Err(Error::InfeasiblePlan(format!("stage {} covers {} devices of {}", s.label, s.flops.len(), self.devices)));
            }
            if let Some(t) = s.transfers.iter().find(|t| t.from >= self.devices || t.to >= self.devices || t.from == t.to) {
                return Err(Error::InfeasiblePlan(format!("bad transfer {t:?} in stage {}", s.label)));
            }
        }
        if let Some(g) = self.groups.iter().find(|g| g.device >= self.devices) {
            return Err(Error::InfeasiblePlan(format!("group {} on unknown device {}", g.name, g.device)));
        }
        Ok(())
    }
}

fn need_devices(n: usize, profile: &Profile) -> Result<()> {
    if n == 0 || n > profile.devices.len() {
        return Err(Error::InfeasiblePlan(format!("plan needs {n} devices, profile has {}", profile.devices.len())));
    }
    Ok(())
}

/// Whole model on device 0 as a single stage.
pub fn plan_single(spec: &ModelSpec) -> Result<DeploymentPlan> {
    let s = spec.layer_summary()?;
    let groups = vec![ParamGroup {
        name: "model".into(),
        device: 0,
        params: s.iter().map(|l| l.params as u64).sum(),
        tensors: s.iter().map(|l| l.tensors as u64).sum(),
    }];
    let flops = vec![s.iter().map(|l| l.flops).sum()];
    Ok(DeploymentPlan {
        strategy: Strategy::Single,
        devices: 1,
        groups,
        stages: vec![Stage { label: "model".into(), flops, transfers: vec![], boundary: Boundary::Final }],
    })
}

/// Channels `i < c` with `i mod d == j`.
fn shard(c: usize, d: usize, j: usize) -> usize {
    (c + d - 1 - j) / d
}

/// Horizontal split: every conv and dense layer deals its filters
/// round-robin over `d` devices (batch norm follows its channels). After a
/// weight layer each device receives, by unicast, every channel it does not
/// hold of the tensor the next weight layer reads: the layer's output, or
/// its pooled vector when the global pool comes first. The last layer's
/// output stays sharded.
pub fn plan_layer_split(spec: &ModelSpec, d: usize, profile: &Profile) -> Result<DeploymentPlan> {
    need_devices(d, profile)?;
    let summary = spec.layer_summary()?;
    let mut groups = Vec::new();
    let mut stages = Vec::new();
    let weight_idx: Vec<usize> = (0..summary.len()).filter(|&i| matches!(summary[i].kind, LayerKind::Conv | LayerKind::Dense)).collect();
    for (i, info) in summary.iter().enumerate() {
        match info.kind {
            LayerKind::Conv | LayerKind::Dense => {
                let c = match info.output {
                    Shape::Map { c, .. } => c,
                    Shape::Flat(f) => f,
                };
                let (per_param, per_flop) = (info.params / c, info.flops / c as u64);
                let flops = (0..d).map(|j| per_flop * shard(c, d, j) as u64).collect();
                for j in (0..d).filter(|&j| shard(c, d, j) > 0) {
                    groups.push(ParamGroup {
                        name: format!("layer{i}/shard{j}"),
                        device: j,
                        params: (per_param * shard(c, d, j)) as u64,
                        tensors: info.tensors as u64,
                    });
                }
                let next = weight_idx.iter().copied().find(|&w| w > i);
                let mut transfers = Vec::new();
                let mut boundary = Boundary::Final;
                if let Some(next) = next {
                    let pooled = summary[i + 1..next].iter().any(|l| l.kind == LayerKind::GlobalAvgPool);
                    let per_channel = if pooled { 1 } else { info.output.numel() / c };
                    if summary[next].kind == LayerKind::Conv {
                        boundary = Boundary::Internal;
                    }
                    for from in 0..d {
                        for to in (0..d).filter(|&t| t != from) {
                            transfers.push(Transfer { from, to, elements: (shard(c, d, from) * per_channel) as u64 });
                        }
                    }
                }
                stages.push(Stage { label: format!("layer{i}"), flops, transfers, boundary });
            }
            LayerKind::BatchNorm => {
                let c = match info.output {
                    Shape::Map { c, .. } => c,
                    Shape::Flat(f) => f,
                };
                for j in (0..d).filter(|&j| shard(c, d, j) > 0) {
                    groups.push(ParamGroup {
                        name: format!("layer{i}/shard{j}"),
                        device: j,
                        params: 2 * shard(c, d, j) as u64,
                        tensors: info.tensors as u64,
                    });
                }
            }
            _ => {}
        }
    }
    Ok(DeploymentPlan { strategy: Strategy::LayerSplit { d }, devices: d, groups, stages })
}

/// Trunk `s` on device `s`; the head on `aggregator`, which receives each
/// other trunk's pooled vector once.
pub fn plan_nonn<T: Real>(nonn: &NoNNModel<T>, profile: &Profile, aggregator: usize) -> Result<DeploymentPlan> {
    let k = nonn.k();
    need_devices(k, profile)?;
    if aggregator >= k {
        return Err(Error::InfeasiblePlan(format!("aggregator {aggregator} runs no trunk (k = {k})")));
    }
    let widths = nonn.widths();
    let classes = nonn.classes() as u64;
    let mut groups = Vec::new();
    let mut trunk_flops = vec![0; k];
    for s in 0..k {
        let summary = nonn.trunks[s].spec().layer_summary()?;
        groups.push(ParamGroup {
            name: format!("trunk{s}"),
            device: s,
            params: nonn.trunks[s].num_params() as u64,
            tensors: summary.iter().map(|l| l.tensors as u64).sum(),
        });
        groups.push(ParamGroup { name: format!("head/w{s}"), device: aggregator, params: widths[s] as u64 * classes, tensors: 1 });
        trunk_flops[s] = nonn.trunk_flops(s)?;
    }
    groups.push(ParamGroup { name: "head/b".into(), device: aggregator, params: classes, tensors: 1 });
    let transfers = (0..k).filter(|&s| s != aggregator).map(|s| Transfer { from: s, to: aggregator, elements: widths[s] as u64 }).collect();
    let mut head_flops = vec![0; k];
    head_flops[aggregator] = nonn.head_flops();
    Ok(DeploymentPlan {
        strategy: Strategy::Nonn { k, aggregator },
        devices: k,
        groups,
        stages: vec![
            Stage { label: "trunks".into(), flops: trunk_flops, transfers, boundary: Boundary::Final },
            Stage { label: "head".into(), flops: head_flops, transfers: vec![], boundary: Boundary::Final },
        ],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub strategy: Strategy,
    pub device_params: Vec<u64>,
    pub device_memory: Vec<u64>,
    pub device_flops: Vec<u64>,
    pub traffic_bytes: u64,
    /// Bytes sent before the classifier boundary.
    pub internal_traffic_bytes: u64,
    pub messages: u64,
    pub latency_s: f64,
    pub energy_j: f64,
    pub feasible: bool,
    pub violations: Vec<String>,
}

impl CostReport {
    pub fn total_flops(&self) -> u64 {
        self.device_flops.iter().sum()
    }

    pub fn total_params(&self) -> u64 {
        self.device_params.iter().sum()
    }

    pub fn require_feasible(&self) -> Result<()> {
        if self.feasible {
            Ok(())
        } else {
            Err(Error::InfeasiblePlan(self.violations.join("; ")))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn elements_bytes(elements: u64, bits: u32) -> u64 {
    (elements * bits as u64).div_ceil(8)
}

/// Layer-synchronous cost: per stage the slowest device's compute, then
/// that stage's bytes over one link plus a fixed cost per message.
/// Memory is quantised parameter storage; a device over its budget makes
/// the report infeasible, naming the device.
pub fn simulate(plan: &DeploymentPlan, profile: &Profile) -> Result<CostReport> {
    profile.validate()?;
    plan.validate()?;
    need_devices(plan.devices, profile)?;
    let devs = &profile.devices[..plan.devices];
    let link = &profile.link;
    let device_params: Vec<u64> = (0..plan.devices).map(|j| plan.params_on(j)).collect();
    let device_memory: Vec<u64> =
        (0..plan.devices).map(|j| memory_footprint(plan.params_on(j), plan.tensors_on(j), profile.weight_bits)).collect();
    let device_flops: Vec<u64> = (0..plan.devices).map(|j| plan.flops_on(j)).collect();
    let mut violations = Vec::new();
    for (j, (&m, d)) in device_memory.iter().zip(devs).enumerate() {
        if m > d.memory_bytes {
            violations.push(format!("device {j} needs {m} bytes, has {}", d.memory_bytes));
        }
    }
    let (mut latency, mut traffic, mut internal, mut messages) = (0.0, 0, 0, 0);
    for s in &plan.stages {
        let compute = s.flops.iter().zip(devs).map(|(&f, d)| f as f64 / d.flops_per_sec).fold(0.0, f64::max);
        let bytes: u64 = s.transfers.iter().map(|t| elements_bytes(t.elements, profile.activation_bits)).sum();
        latency += compute + bytes as f64 / link.bytes_per_sec + s.transfers.len() as f64 * link.message_latency;
        traffic += bytes;
        messages += s.transfers.len() as u64;
        if s.boundary == Boundary::Internal {
            internal += bytes;
        }
    }
    let energy = device_flops.iter().zip(devs).map(|(&f, d)| f as f64 * d.joules_per_flop).sum::<f64>()
        + traffic as f64 * link.joules_per_byte;
    Ok(CostReport {
        strategy: plan.strategy.clone(),
        device_params,
        device_memory,
        device_flops,
        traffic_bytes: traffic,
        internal_traffic_bytes: internal,
        messages,
        latency_s: latency,
        energy_j: energy,
        feasible: violations.is_empty(),
        violations,
    })
}

/// One row of a comparison: absolute figures and `baseline / row` gains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub max_device_params: u64,
    pub max_device_flops: u64,
    pub max_device_memory: u64,
    pub traffic_bytes: u64,
    pub latency_s: f64,
    pub energy_j: f64,
    pub feasible: bool,
    pub param_gain: f64,
    pub flop_gain: f64,
    pub memory_gain: f64,
    pub latency_gain: f64,
    pub energy_gain: f64,
    pub traffic_gain: f64,
}

fn gain(base: f64, x: f64) -> f64 {
    if base == x {
        1.0
    } else {
        base / x
    }
}

/// Per-device figures take the busiest device. The baseline must be one of
/// the named reports.
pub fn compare_report(reports: &[(String, CostReport)], baseline: &str) -> Result<Vec<ComparisonRow>> {
    if reports.len() < 2 {
        return Err(Error::InvalidConfig("comparison needs at least two reports".into()));
    }
    let max = |v: &[u64]| v.iter().copied().max().unwrap_or(0);
    let base = &reports
        .iter()
        .find(|(n, _)| n == baseline)
        .ok_or_else(|| Error::InvalidConfig(format!("baseline {baseline} not among reports")))?
        .1;
    Ok(reports
        .iter()
        .map(|(name, r)| ComparisonRow {
            name: name.clone(),
            max_device_params: max(&r.device_params),
            max_device_flops: max(&r.device_flops),
            max_device_memory: max(&r.device_memory),
            traffic_bytes: r.traffic_bytes,
            latency_s: r.latency_s,
            energy_j: r.energy_j,
            feasible: r.feasible,
            param_gain: gain(max(&base.device_params) as f64, max(&r.device_params) as f64),
            flop_gain: gain(max(&base.device_flops) as f64, max(&r.device_flops) as f64),
            memory_gain: gain(max(&base.device_memory) as f64, max(&r.device_memory) as f64),
            latency_gain: gain(base.latency_s, r.latency_s),
            energy_gain: gain(base.energy_j, r.energy_j),
            traffic_gain: gain(base.traffic_bytes as f64, r.traffic_bytes as f64),
        })
        .collect())
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from(
        "name,max_device_params,max_device_flops,max_device_memory,traffic_bytes,latency_s,energy_j,feasible,\
         param_gain,flop_gain,memory_gain,latency_gain,energy_gain,traffic_gain\n",
    );
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{:.9},{:.9},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.name,
            r.max_device_params,
            r.max_device_flops,
            r.max_device_memory,
            r.traffic_bytes,
            r.latency_s,
            r.energy_j,
            r.feasible,
            r.param_gain,
            r.flop_gain,
            r.memory_gain,
            r.latency_gain,
            r.energy_gain,
            r.traffic_gain
        )
        .expect("string write");
    }
    s
}

#[cfg(test)]
mod tests;
