use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distill::predict_features;
use crate::error::{Error, Result};
use crate::zoo::Model;

/// Relative threshold below which a filter counts as dead.
pub const DEAD_EPSILON: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterNode {
    /// Channel index at the teacher's `final_conv` tap.
    pub filter: usize,
    /// Mean pooled activation per class.
    pub profile: Vec<f64>,
    /// Mean of `profile`.
    pub activity: f64,
}

/// Co-activation graph over live final-conv filters. `weights` is the dense
/// symmetric `n×n` matrix over `nodes` with a zero diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterGraph {
    pub nodes: Vec<FilterNode>,
    pub dead: Vec<usize>,
    pub weights: Vec<f64>,
}

impl FilterGraph {
    /// Graph from class profiles (one row per filter). Filters whose peak
    /// class mean is below `DEAD_EPSILON ×` the largest activity are
    /// dropped; `w_ij = Σ_c ā_i(c)·ā_j(c)` for the rest.
    pub fn from_profiles(profiles: &[Vec<f64>]) -> Result<Self> {
        let activity: Vec<f64> = profiles.iter().map(|p| p.iter().sum::<f64>() / p.len().max(1) as f64).collect();
        let top = activity.iter().fold(0.0f64, |a, &b| a.max(b));
        let mut nodes = Vec::new();
        let mut dead = Vec::new();
        for (i, p) in profiles.iter().enumerate() {
            let peak = p.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            if top <= 0.0 || peak < DEAD_EPSILON * top {
                dead.push(i);
            } else {
                nodes.push(FilterNode { filter: i, profile: p.clone(), activity: activity[i] });
            }
        }
        let n = nodes.len();
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let w: f64 = nodes[i].profile.iter().zip(&nodes[j].profile).map(|(a, b)| a * b).sum();
                weights[i * n + j] = w;
                weights[j * n + i] = w;
            }
        }
        Ok(Self { nodes, dead, weights })
    }

    /// Graph with explicit weights and activities; node `i` is filter `i`.
    pub fn from_weights(n: usize, weights: Vec<f64>, activity: Vec<f64>) -> Result<Self> {
        if weights.len() != n * n || activity.len() != n {
            return Err(Error::shape("filter graph", format!("{n} nodes need {} weights and {n} activities", n * n)));
        }
        for i in 0..n {
            if weights[i * n + i] != 0.0 {
                return Err(Error::InvalidConfig(format!("self-loop on node {i}")));
            }
            for j in 0..n {
                let w = weights[i * n + j];
                if !(w >= 0.0) || w != weights[j * n + i] {
                    return Err(Error::InvalidConfig(format!("weight ({i},{j}) must be symmetric and non-negative")));
                }
            }
        }
        let nodes = activity.into_iter().enumerate().map(|(filter, a)| FilterNode { filter, profile: vec![a], activity: a }).collect();
        Ok(Self { nodes, dead: Vec::new(), weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.len() + j]
    }

    pub fn degree(&self, i: usize) -> f64 {
        let n = self.len();
        self.weights[i * n..(i + 1) * n].iter().sum()
    }

    /// Total edge weight `m` (each undirected edge once).
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum::<f64>() / 2.0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `filter_i filter_j weight` per positive edge, `i < j`.
    pub fn edge_list(&self) -> String {
        let mut s = String::new();
        let n = self.len();
        for i in 0..n {
            for j in i + 1..n {
                let w = self.weight(i, j);
                if w > 0.0 {
                    writeln!(s, "{} {} {w:.9e}", self.nodes[i].filter, self.nodes[j].filter).expect("string write");
                }
            }
        }
        s
    }
}

/// Per-class mean of each `avg_pool` channel over `ds`, then the graph.
pub fn build_fan(teacher: &Model, ds: &Dataset) -> Result<FilterGraph> {
    ds.require_all_classes()?;
    let (_, pooled) = predict_features(teacher, &ds.images, 256)?;
    let ch = pooled.shape()[1];
    let counts = ds.class_counts();
    let mut profiles = vec![vec![0.0f64; ds.classes]; ch];
    for (i, &label) in ds.labels.iter().enumerate() {
        for (f, prof) in profiles.iter_mut().enumerate() {
            prof[label as usize] += pooled.data()[i * ch + f] as f64;
        }
    }
    for prof in &mut profiles {
        for (v, &n) in prof.iter_mut().zip(&counts) {
            *v /= n as f64;
        }
    }
    FilterGraph::from_profiles(&profiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_shapes, MotifSet, ShapesConfig};
    use crate::fan::detect_communities;
    use crate::zoo::{plain_cnn, InputShape};

    #[test]
    fn identical_profiles_tie_for_strongest_edge() {
        let p = vec![vec![1.0, 2.0, 0.5], vec![1.0, 2.0, 0.5], vec![0.1, 0.0, 0.3]];
        let g = FilterGraph::from_profiles(&p).unwrap();
        assert_eq!(g.weight(0, 1), 1.0 + 4.0 + 0.25);
        assert!(g.weight(0, 1) >= g.weight(0, 2) && g.weight(1, 0) >= g.weight(1, 2));
    }

    #[test]
    fn disjoint_class_halves_do_not_connect() {
        let p = vec![vec![1.0, 0.7, 0.0, 0.0], vec![0.3, 0.9, 0.0, 0.0], vec![0.0, 0.0, 0.4, 0.8]];
        let g = FilterGraph::from_profiles(&p).unwrap();
        assert_eq!((g.weight(0, 2), g.weight(1, 2)), (0.0, 0.0));
        assert!(g.weight(0, 1) > 0.0);
    }

    #[test]
    fn zero_filter_is_dead() {
        let spec = plain_cnn(InputShape::new(1, 8, 8), 2, &[(4, 1)]);
        let mut m = Model::<f32>::build(&spec, 5).unwrap();
        // conv weights [4,1,3,3] then bias [4]
        m.params[0].data_mut()[2 * 9..3 * 9].iter_mut().for_each(|v| *v = 0.0);
        m.params[1].data_mut()[2] = 0.0;
        let mut cfg = ShapesConfig::new(MotifSet::Primary, 2, 8, 0.05, 1);
        cfg.size = 8;
        let mut ds = gen_shapes(&cfg).unwrap();
        // gray copies to match the 1-channel model
        let n = ds.len();
        let px: Vec<f32> = ds.images.data().chunks(3 * 64).flat_map(|im| im[..64].to_vec()).collect();
        ds.images = crate::Tensor::new(&[n, 1, 8, 8], px).unwrap();
        let g = build_fan(&m, &ds).unwrap();
        assert!(g.dead.contains(&2));
        assert!(g.nodes.iter().all(|nd| nd.filter != 2));
    }

    #[test]
    fn planted_cliques_recovered() {
        let n = 16;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j && (i < 8) == (j < 8) {
                    w[i * n + j] = 1.0;
                }
            }
        }
        w[7 * n + 8] = 0.05;
        w[8 * n + 7] = 0.05;
        let g = FilterGraph::from_weights(n, w, vec![1.0; n]).unwrap();
        let p = detect_communities(&g, 1.0, 11).unwrap();
        let want: Vec<usize> = (0..n).map(|i| usize::from(i >= 8)).collect();
        assert_eq!(p.community, want);
        assert!(p.trace.windows(2).all(|t| t[1] >= t[0] - 1e-12));
    }

    #[test]
    fn edge_list_lines() {
        let g = FilterGraph::from_profiles(&[vec![1.0], vec![2.0], vec![0.0]]).unwrap();
        assert_eq!(g.dead, vec![2]);
        assert_eq!(g.edge_list().lines().count(), 1);
        assert!(g.edge_list().starts_with("0 1 "));
    }
}
