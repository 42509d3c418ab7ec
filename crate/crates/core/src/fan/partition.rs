use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FilterGraph;
use crate::error::{Error, Result};

/// Assignment of every live node of a [`FilterGraph`] to one community.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Community of node `i` (position in `FilterGraph::nodes`); labels are
    /// `0..k`, numbered by first appearance.
    pub community: Vec<usize>,
    /// Teacher filter index of node `i`.
    pub filters: Vec<usize>,
    pub k: usize,
    pub modularity: f64,
    /// Modularity after each aggregation level of the detector, if any.
    #[serde(default)]
    pub trace: Vec<f64>,
}

impl Partition {
    /// Relabel by first appearance and compute modularity.
    pub fn new(g: &FilterGraph, labels: &[usize]) -> Result<Self> {
        let community = canonical(labels);
        let k = community.iter().max().map_or(0, |m| m + 1);
        let modularity = modularity(g, &community)?;
        let filters = g.nodes.iter().map(|n| n.filter).collect();
        Ok(Self { community, filters, k, modularity, trace: Vec::new() })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        self.community.iter().for_each(|&c| s[c] += 1);
        s
    }

    /// Node positions in community `c`.
    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.community.len()).filter(|&i| self.community[i] == c).collect()
    }

    /// Teacher filter indices of every community.
    pub fn filter_groups(&self) -> Vec<Vec<usize>> {
        (0..self.k).map(|c| self.members(c).into_iter().map(|i| self.filters[i]).collect()).collect()
    }

    /// Disjoint, covering and no empty community.
    pub fn validate(&self) -> Result<()> {
        if self.filters.len() != self.community.len() {
            return Err(Error::InvalidConfig("partition filter map does not match its assignment".into()));
        }
        if let Some(c) = self.sizes().iter().position(|&s| s == 0) {
            return Err(Error::InvalidConfig(format!("community {c} is empty")));
        }
        if let Some(i) = self.community.iter().position(|&c| c >= self.k) {
            return Err(Error::UncoveredNode(i));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Weighted Newman modularity `Σ_c (e_c/m − (d_c/2m)²)`; zero for a graph
/// without edges.
pub fn modularity(g: &FilterGraph, labels: &[usize]) -> Result<f64> {
    if labels.len() != g.len() {
        return Err(Error::UncoveredNode(labels.len().min(g.len())));
    }
    let m = g.total_weight();
    if m <= 0.0 {
        return Ok(0.0);
    }
    let k = labels.iter().max().map_or(0, |x| x + 1);
    let (mut internal, mut degree) = (vec![0.0; k], vec![0.0; k]);
    let n = g.len();
    for i in 0..n {
        degree[labels[i]] += g.degree(i);
        for j in i + 1..n {
            if labels[i] == labels[j] {
                internal[labels[i]] += g.weight(i, j);
            }
        }
    }
    Ok(internal.iter().zip(&degree).map(|(e, d)| e / m - (d / (2.0 * m)).powi(2)).sum())
}

/// Weighted graph with self-loops, as produced by aggregation.
struct Level {
    adj: Vec<Vec<(usize, f64)>>,
    /// Self-loop weight per node (internal weight of the merged group).
    self_loops: Vec<f64>,
}

impl Level {
    fn degree(&self, i: usize) -> f64 {
        self.adj[i].iter().map(|&(_, w)| w).sum::<f64>() + 2.0 * self.self_loops[i]
    }
}

/// Local-move phase: returns node → community (not renumbered) and whether
/// anything moved.
fn local_moves(lv: &Level, resolution: f64, m2: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
    let n = lv.adj.len();
    let deg: Vec<f64> = (0..n).map(|i| lv.degree(i)).collect();
    let mut comm: Vec<usize> = (0..n).collect();
    let mut tot = deg.clone();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut moved_any = false;
    let mut link = vec![0.0; n];
    let mut touched = Vec::new();
    loop {
        let mut moved = false;
        for &i in &order {
            let own = comm[i];
            for &(j, w) in &lv.adj[i] {
                if link[comm[j]] == 0.0 {
                    touched.push(comm[j]);
                }
                link[comm[j]] += w;
            }
            tot[own] -= deg[i];
            let gain = |c: usize, l: f64| l - resolution * tot[c] * deg[i] / m2;
            let mut best = (own, gain(own, link[own]));
            for &c in &touched {
                let g = gain(c, link[c]);
                if g > best.1 + 1e-12 || (g >= best.1 - 1e-12 && c < best.0 && c != own && best.0 != own) {
                    best = (c, g);
                }
            }
            tot[best.0] += deg[i];
            if best.0 != own {
                comm[i] = best.0;
                moved = true;
                moved_any = true;
            }
            for &c in &touched {
                link[c] = 0.0;
            }
            link[own] = 0.0;
            touched.clear();
        }
        if !moved {
            break;
        }
    }
    (comm, moved_any)
}

fn aggregate(lv: &Level, comm: &[usize]) -> (Level, Vec<usize>) {
    let labels = canonical(comm);
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut self_loops = vec![0.0; k];
    let mut acc = vec![std::collections::BTreeMap::<usize, f64>::new(); k];
    for (i, nbrs) in lv.adj.iter().enumerate() {
        let ci = labels[i];
        self_loops[ci] += lv.self_loops[i];
        for &(j, w) in nbrs {
            let cj = labels[j];
            if ci == cj {
                // each internal edge is seen from both ends
                self_loops[ci] += w / 2.0;
            } else {
                *acc[ci].entry(cj).or_insert(0.0) += w;
            }
        }
    }
    let adj = acc.into_iter().map(|m| m.into_iter().collect()).collect();
    (Level { adj, self_loops }, labels)
}

fn louvain_once(g: &FilterGraph, resolution: f64, seed: u64) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = g.len();
    let adj = (0..n).map(|i| (0..n).filter(|&j| j != i && g.weight(i, j) > 0.0).map(|j| (j, g.weight(i, j))).collect()).collect();
    let mut lv = Level { adj, self_loops: vec![0.0; n] };
    let m2 = 2.0 * g.total_weight();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut node_comm: Vec<usize> = (0..n).collect();
    let mut trace = vec![modularity(g, &node_comm)?];
    loop {
        let (comm, moved) = local_moves(&lv, resolution, m2, &mut rng);
        if !moved {
            break;
        }
        let (next, labels) = aggregate(&lv, &comm);
        node_comm.iter_mut().for_each(|c| *c = labels[*c]);
        trace.push(modularity(g, &node_comm)?);
        lv = next;
    }
    Ok((node_comm, trace))
}

/// Independent detector runs with different visiting orders; the best is kept.
pub const RESTARTS: u64 = 8;

/// Louvain-style modularity maximisation: repeated local node moves and
/// community aggregation until no move improves the objective. Several
/// seeded restarts are run and the highest-modularity result is returned.
/// A graph with no edge weight yields singletons with `Q = 0`.
pub fn detect_communities(g: &FilterGraph, resolution: f64, seed: u64) -> Result<Partition> {
    if g.is_empty() {
        return Err(Error::InvalidConfig("cannot partition an empty graph".into()));
    }
    if g.total_weight() <= 0.0 {
        let labels: Vec<usize> = (0..g.len()).collect();
        return Partition::new(g, &labels);
    }
    let mut best: Option<Partition> = None;
    for r in 0..RESTARTS {
        let (labels, trace) = louvain_once(g, resolution, seed.wrapping_mul(RESTARTS).wrapping_add(r))?;
        let mut p = Partition::new(g, &labels)?;
        p.trace = trace;
        if best.as_ref().is_none_or(|b| p.modularity > b.modularity + 1e-12) {
            best = Some(p);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Force exactly `k` groups of at most `budget` nodes.
///
/// 1. Any community above `budget` is cut, in descending node activity,
///    into `budget`-sized chunks.
/// 2. While there are fewer than `k` groups the largest is halved the same
///    way.
/// 3. With more than `k` groups, groups are taken largest first (ties by
///    label); the first `k` open one bin each, the rest go to the first bin
///    with room. A group that fits nowhere is spread over the bins with the
///    most remaining capacity, highest-activity nodes first.
pub fn balance_partitions(g: &FilterGraph, part: &Partition, k: usize, budget: usize) -> Result<Partition> {
    let n = g.len();
    if k == 0 || budget == 0 {
        return Err(Error::InfeasibleBudget("k and budget must be positive".into()));
    }
    if n > k * budget {
        return Err(Error::InfeasibleBudget(format!("{n} filters exceed {k} devices × {budget}")));
    }
    if n < k {
        return Err(Error::InfeasibleBudget(format!("{n} filters cannot fill {k} non-empty groups")));
    }
    if part.community.len() != n {
        return Err(Error::UncoveredNode(part.community.len().min(n)));
    }
    let by_activity = |mut v: Vec<usize>| {
        v.sort_by(|&a, &b| g.nodes[b].activity.total_cmp(&g.nodes[a].activity).then(a.cmp(&b)));
        v
    };
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for c in 0..part.k {
        let m = by_activity(part.members(c));
        groups.extend(m.chunks(budget).map(<[usize]>::to_vec));
    }
    while groups.len() < k {
        let (li, _) = groups.iter().enumerate().max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0))).expect("non-empty");
        let big = by_activity(groups.remove(li));
        let half = big.len().div_ceil(2);
        groups.insert(li, big[half..].to_vec());
        groups.insert(li, big[..half].to_vec());
    }
    if groups.len() > k {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.sort_by(|&a, &b| groups[b].len().cmp(&groups[a].len()).then(a.cmp(&b)));
        let mut bins: Vec<Vec<usize>> = order[..k].iter().map(|&i| groups[i].clone()).collect();
        for &gi in &order[k..] {
            let item = &groups[gi];
            if let Some(b) = bins.iter_mut().find(|b| b.len() + item.len() <= budget) {
                b.extend_from_slice(item);
                continue;
            }
            let mut rest = by_activity(item.clone());
            while !rest.is_empty() {
                let (bi, _) = bins.iter().enumerate().min_by(|a, b| a.1.len().cmp(&b.1.len()).then(a.0.cmp(&b.0))).expect("k > 0");
                let room = budget - bins[bi].len();
                let take = room.min(rest.len());
                bins[bi].extend(rest.drain(..take));
            }
        }
        groups = bins;
    }
    let mut labels = vec![0; n];
    for (c, grp) in groups.iter().enumerate() {
        for &i in grp {
            labels[i] = c;
        }
    }
    // keep labels in group order rather than first appearance
    let community = labels;
    let modularity = modularity(g, &community)?;
    let filters = g.nodes.iter().map(|n| n.filter).collect();
    Ok(Partition { community, filters, k, modularity, trace: Vec::new() })
}
