use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::NoNNModel;
use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::zoo::Mode;

/// Outcome of propagating trunk ownership through a recorded forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaintReport {
    pub nodes: usize,
    /// Tape index of the concatenation joining the trunks.
    pub concat_node: usize,
    /// Nodes before the join that depend on more than one trunk.
    pub violations: Vec<usize>,
    /// Trunks each pooled feature block depends on.
    pub feature_taints: Vec<Vec<usize>>,
    /// Trunks the logits depend on.
    pub logit_taint: Vec<usize>,
}

impl TaintReport {
    /// No pre-join node mixes trunks, each feature block comes from exactly
    /// its own trunk, and the logits see all of them.
    pub fn isolated(&self) -> bool {
        let k = self.feature_taints.len();
        self.violations.is_empty()
            && self.feature_taints.iter().enumerate().all(|(s, t)| t == &[s])
            && self.logit_taint == (0..k).collect::<Vec<_>>()
    }
}

/// Record one inference pass on a zero image and push, node by node, the
/// set of trunks whose parameters each value depends on. The shared input
/// image carries no taint.
pub fn taint_check<T: Real>(nonn: &NoNNModel<T>) -> Result<TaintReport> {
    let inp = nonn.input();
    let mut tape = Tape::<T>::new();
    let tp: Vec<Vec<Var>> = nonn.trunks.iter().map(|t| t.bind(&mut tape, false)).collect();
    let x = tape.constant(Tensor::zeros(&[1, inp.channels, inp.height, inp.width]));
    let (w, b) = (tape.constant(nonn.head_w.clone()), tape.constant(nonn.head_b.clone()));
    let f = nonn.forward_on(&mut tape, &tp, (w, b), x, Mode::Eval)?;

    let mut taint: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); tape.len()];
    for (s, vars) in tp.iter().enumerate() {
        for v in vars {
            taint[v.index()].insert(s);
        }
    }
    for i in 0..tape.len() {
        let from: Vec<usize> = tape.inputs_of(i);
        for j in from {
            let t = taint[j].clone();
            taint[i].extend(t);
        }
    }
    let concat_node = f.concat.index();
    let violations = (0..concat_node).filter(|&i| taint[i].len() > 1).collect();
    let as_vec = |v: Var| taint[v.index()].iter().copied().collect::<Vec<_>>();
    Ok(TaintReport {
        nodes: tape.len(),
        concat_node,
        violations,
        feature_taints: f.features.iter().map(|&v| as_vec(v)).collect(),
        logit_taint: as_vec(f.logits),
    })
}
