//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use edgeai::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduce an arbitrary tensor to a scalar with fixed random weights so every
/// output element contributes a distinct gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let w = tape.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let p = tape.mul(v, w).unwrap();
    tape.sum(p).unwrap()
}

/// Result of comparing tape gradients with central differences.
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Smallest |value| seen at any ReLU input; small margins mean the finite
    /// difference may straddle a kink.
    pub relu_margin: f64,
}

/// `build` records a loss on the tape from the given leaves and returns it
/// with the variables that feed ReLUs.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    step: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> (Var, Vec<Var>),
) -> GradCheck {
    let mut tape = Tape::<f64>::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let (loss, relu_inputs) = build(&mut tape, &leaves);
    let relu_margin = relu_inputs
        .iter()
        .flat_map(|&v| tape.value(v).data().to_vec())
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&l, t)| tape.grad(l).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let (loss, _) = build(&mut tape, &leaves);
        tape.value(loss).item()
    };

    let mut max_rel_err: f64 = 0.0;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            max_rel_err = max_rel_err.max(rel);
        }
    }
    GradCheck { max_rel_err, relu_margin }
}

/// Nested-loop cross-correlation with zero padding.
pub fn conv2d_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, r, s) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - r) / stride + 1;
    let ow = (wd + 2 * pad - s) / stride + 1;
    let mut out = vec![0.0; n * k * oh * ow];
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ri in 0..r {
                            for si in 0..s {
                                let iy = (oy * stride + ri) as isize - pad as isize;
                                let ix = (ox * stride + si) as isize - pad as isize;
                                let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    0.0
                                } else {
                                    x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                };
                                acc += v * w.data()[((ki * c + ci) * r + ri) * s + si];
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc += b.data()[ki];
                    }
                    out[((ni * k + ki) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, k, oh, ow], out).unwrap()
}

/// Weighted Newman modularity by direct double sum over node pairs.
pub fn modularity_pairs(n: usize, edges: &[(usize, usize, f64)], labels: &[usize]) -> f64 {
    let mut a = vec![0.0; n * n];
    for &(i, j, w) in edges {
        a[i * n + j] += w;
        a[j * n + i] += w;
    }
    let k: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
    let two_m: f64 = k.iter().sum();
    if two_m == 0.0 {
        return 0.0;
    }
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                q += a[i * n + j] - k[i] * k[j] / two_m;
            }
        }
    }
    q / two_m
}

/// All set partitions of `n` items as restricted-growth label strings.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, n: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        for l in 0..=max + 1 {
            cur.push(l);
            rec(i + 1, n, max.max(l), cur, out);
            cur.pop();
        }
    }
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    let mut cur = vec![0];
    rec(1, n, 0, &mut cur, &mut out);
    out
}

/// Best modularity over every partition of a small graph.
pub fn exhaustive_max_modularity(n: usize, edges: &[(usize, usize, f64)]) -> f64 {
    set_partitions(n).iter().map(|p| modularity_pairs(n, edges, p)).fold(f64::NEG_INFINITY, f64::max)
}

/// Random weighted graphs on 3..=10 nodes used by the community-detection oracle.
pub fn small_graph_suite() -> Vec<(usize, Vec<(usize, usize, f64)>)> {
    let mut suite = Vec::new();
    for seed in 0..24u64 {
        let mut r = rng(1000 + seed);
        let n = 3 + (seed as usize % 8);
        let p = 0.3 + 0.5 * r.random::<f64>();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if r.random::<f64>() < p {
                    edges.push((i, j, 0.1 + r.random::<f64>()));
                }
            }
        }
        suite.push((n, edges));
    }
    // planted structures
    let tri = |o: usize| vec![(o, o + 1, 1.0), (o + 1, o + 2, 1.0), (o, o + 2, 1.0)];
    let mut two_tri = tri(0);
    two_tri.extend(tri(3));
    suite.push((6, two_tri.clone()));
    two_tri.push((2, 3, 0.2));
    suite.push((6, two_tri));
    let mut ring = Vec::new();
    for i in 0..10 {
        ring.push((i, (i + 1) % 10, 1.0));
    }
    suite.push((10, ring));
    let mut cliques = Vec::new();
    for base in [0, 5] {
        for i in base..base + 5 {
            for j in i + 1..base + 5 {
                cliques.push((i, j, 1.0));
            }
        }
    }
    cliques.push((4, 5, 0.5));
    suite.push((10, cliques));
    suite
}
