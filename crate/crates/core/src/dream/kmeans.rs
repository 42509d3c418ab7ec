use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Result of Lloyd's algorithm on `M` points of dimension `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    /// `k×D`, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after seeding and after every iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is
/// stable or `max_iters` is reached. A cluster that loses all members is
/// re-seeded at the point farthest from its current centroid.
pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::shape("kmeans", format!("{} values is not a whole number of {dim}-vectors", points.len())));
    }
    let m = points.len() / dim;
    if m < k {
        return Err(Error::InvalidConfig(format!("{m} points cannot form {k} clusters")));
    }
    let pt = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(pt(rng.random_range(0..m)));
    let mut d2: Vec<f64> = (0..m).map(|i| sq(pt(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            d2.iter().position(|&d| {
                r -= d;
                r < 0.0
            })
            .unwrap_or(m - 1)
        } else {
            rng.random_range(0..m)
        };
        centroids.extend_from_slice(pt(pick));
        let c = centroids.len() - dim;
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq(pt(i), &centroids[c..]));
        }
    }

    let mut assignments: Vec<usize> = (0..m).map(|i| nearest(pt(i), &centroids, dim).0).collect();
    let wcss = |c: &[f64], a: &[usize]| (0..m).map(|i| sq(pt(i), &c[a[i] * dim..(a[i] + 1) * dim])).sum::<f64>();
    let mut objective = vec![wcss(&centroids, &assignments)];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        // update step
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(pt(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = s / counts[j] as f64;
                }
            }
        }
        // assignment step
        let mut next: Vec<usize> = (0..m).map(|i| nearest(pt(i), &centroids, dim).0).collect();
        let mut counts = vec![0usize; k];
        next.iter().for_each(|&a| counts[a] += 1);
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            // steal the point worst served by its own centroid, if its cluster can spare it
            let far = (0..m)
                .filter(|&i| counts[next[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq(pt(a), &centroids[next[a] * dim..(next[a] + 1) * dim]);
                    let db = sq(pt(b), &centroids[next[b] * dim..(next[b] + 1) * dim]);
                    da.total_cmp(&db).then(b.cmp(&a))
                });
            if let Some(i) = far {
                counts[next[i]] -= 1;
                next[i] = j;
                counts[j] = 1;
                centroids[j * dim..(j + 1) * dim].copy_from_slice(pt(i));
            }
        }
        let obj = wcss(&centroids, &next);
        objective.push(obj);
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
    }
    Ok(KMeans { k, dim, centroids, assignments, objective, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_is_mean() {
        let pts = [1.0, 2.0, 3.0, 6.0, 5.0, 1.0];
        let km = kmeans(&pts, 2, 1, 0, 10).unwrap();
        assert!((km.centroid(0)[0] - 3.0).abs() < 1e-12 && (km.centroid(0)[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn k_equals_m_has_zero_objective() {
        let pts = [0.0, 0.0, 1.0, 5.0, -3.0, 2.0, 4.0, 4.0];
        let km = kmeans(&pts, 2, 4, 1, 10).unwrap();
        assert_eq!(*km.objective.last().unwrap(), 0.0);
        assert_eq!(km.sizes(), vec![1; 4]);
    }

    #[test]
    fn errors() {
        assert!(kmeans(&[0.0, 1.0], 1, 0, 0, 5).is_err());
        assert!(kmeans(&[0.0, 1.0], 1, 3, 0, 5).is_err());
    }
}
