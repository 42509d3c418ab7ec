//! Data-free distillation: summarise a teacher's average-pool activations
//! per class as k-means clusters with principal axes, sample target
//! activations from that summary, synthesise images that hit the targets,
//! and distil a student on the synthetic images alone.

mod kmeans;
mod pca;
mod synth;

pub use kmeans::{kmeans, KMeans};
pub use pca::{covariance, pca, Pca};
pub use synth::{synthesize_images, SynthHyper, SyntheticSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distill::{evaluate, predict_features, train_kd, History, KdHyper, TrainHyper};
use crate::error::{Error, Result};
use crate::zoo::{Model, ModelSpec};

/// One cluster of one class's activation vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterMeta {
    pub class: usize,
    pub centroid: Vec<f64>,
    /// Orthonormal, by descending standard deviation. Empty for clusters
    /// with fewer than two members.
    pub components: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
    pub count: usize,
}

/// Everything retained about the private data: centroids, principal axes
/// and member counts. No per-image values are stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DreamMetadata {
    pub teacher_fingerprint: String,
    pub channels: usize,
    pub classes: usize,
    pub k: usize,
    pub p: usize,
    pub clusters: Vec<ClusterMeta>,
}

impl DreamMetadata {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.clusters.len() != self.k * self.classes {
            return bad(format!("{} clusters, expected k·L = {}", self.clusters.len(), self.k * self.classes));
        }
        for (i, c) in self.clusters.iter().enumerate() {
            if c.class >= self.classes || c.centroid.len() != self.channels {
                return bad(format!("cluster {i}: class or centroid width out of range"));
            }
            if c.components.len() != c.stds.len() || c.components.len() > self.p {
                return bad(format!("cluster {i}: {} components, {} stds", c.components.len(), c.stds.len()));
            }
            if c.components.iter().any(|v| v.len() != self.channels) {
                return bad(format!("cluster {i}: component width"));
            }
            if c.stds.iter().any(|&s| !(s >= 0.0)) || c.stds.windows(2).any(|w| w[0] < w[1]) {
                return bad(format!("cluster {i}: stds must be non-negative and descending"));
            }
        }
        Ok(())
    }

    /// Number of stored real values (centroids, components, stds, counts).
    pub fn stored_scalars(&self) -> usize {
        self.clusters.iter().map(|c| c.centroid.len() + c.components.iter().map(Vec::len).sum::<usize>() + c.stds.len() + 1).sum()
    }

    /// Upper bound `k·L·C·(p+1) + k·L·(p+1)` on [`Self::stored_scalars`].
    pub fn scalar_budget(&self) -> usize {
        let kl = self.k * self.classes;
        kl * self.channels * (self.p + 1) + kl * (self.p + 1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}

/// Cluster each class's average-pool activations over a stratified
/// `fraction` of `ds`, then run PCA inside every cluster.
pub fn extract_metadata(teacher: &Model, ds: &Dataset, fraction: f64, k: usize, p: usize, seed: u64) -> Result<DreamMetadata> {
    ds.require_all_classes()?;
    let sample = ds.subset(&ds.stratified_sample(fraction, seed)?)?;
    let (_, pooled) = predict_features(teacher, &sample.images, 256)?;
    let dim = pooled.shape()[1];
    let mut clusters = Vec::with_capacity(k * ds.classes);
    for class in 0..ds.classes {
        let members: Vec<usize> = (0..sample.len()).filter(|&i| sample.labels[i] as usize == class).collect();
        if members.len() < k {
            return Err(Error::InvalidConfig(format!("class {class} has {} sampled images, fewer than k = {k}", members.len())));
        }
        let pts: Vec<f64> = members.iter().flat_map(|&i| pooled.data()[i * dim..(i + 1) * dim].iter().map(|&v| v as f64)).collect();
        let km = kmeans(&pts, dim, k, seed.wrapping_add(class as u64), 100)?;
        for j in 0..k {
            let own: Vec<f64> = (0..members.len())
                .filter(|&i| km.assignments[i] == j)
                .flat_map(|i| pts[i * dim..(i + 1) * dim].iter().copied())
                .collect();
            let count = own.len() / dim;
            let (components, stds) = if count >= 2 {
                let r = pca(&own, dim, p)?;
                (r.components, r.stds)
            } else {
                (Vec::new(), Vec::new())
            };
            clusters.push(ClusterMeta { class, centroid: km.centroid(j).to_vec(), components, stds, count });
        }
    }
    let meta = DreamMetadata { teacher_fingerprint: teacher.fingerprint(), channels: dim, classes: ds.classes, k, p, clusters };
    meta.validate()?;
    Ok(meta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DreamTarget {
    pub vector: Vec<f64>,
    pub class: usize,
    /// Index into [`DreamMetadata::clusters`].
    pub cluster: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSet {
    pub targets: Vec<DreamTarget>,
}

/// `n_per_cluster` targets per cluster: `μ + s·Σ_j ε_j σ_j v_j` with
/// standard-normal `ε_j`.
pub fn gen_targets(meta: &DreamMetadata, n_per_cluster: usize, noise_scale: f64, seed: u64) -> Result<TargetSet> {
    meta.validate()?;
    if !(noise_scale >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise scale {noise_scale} must be non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = Vec::with_capacity(n_per_cluster * meta.clusters.len());
    for (ci, c) in meta.clusters.iter().enumerate() {
        for _ in 0..n_per_cluster {
            let mut v = c.centroid.clone();
            for (comp, &sd) in c.components.iter().zip(&c.stds) {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let a = noise_scale * eps * sd;
                v.iter_mut().zip(comp).for_each(|(x, &d)| *x += a * d);
            }
            targets.push(DreamTarget { vector: v, class: c.class, cluster: ci });
        }
    }
    Ok(TargetSet { targets })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DreamHyper {
    pub n_per_cluster: usize,
    pub noise_scale: f64,
    pub synth: SynthHyper,
}

impl Default for DreamHyper {
    fn default() -> Self {
        Self { n_per_cluster: 50, noise_scale: 1.0, synth: SynthHyper::default() }
    }
}

pub struct DreamOutcome {
    pub student: Model,
    pub synthetic: SyntheticSet,
    pub history: History,
    pub test_accuracy: f64,
}

/// Targets → synthetic images → unlabelled KD. The real `test` split is
/// touched only for the final evaluation.
pub fn dream_distill(
    teacher: &Model,
    student_spec: &ModelSpec,
    meta: &DreamMetadata,
    dream: &DreamHyper,
    train: &TrainHyper,
    kd: &KdHyper,
    test: &Dataset,
) -> Result<DreamOutcome> {
    let targets = gen_targets(meta, dream.n_per_cluster, dream.noise_scale, dream.synth.seed)?;
    let synthetic = synthesize_images(teacher, &targets, &dream.synth)?;
    let mut student = Model::build(student_spec, train.seed)?;
    let kd = KdHyper { alpha: 1.0, ..*kd };
    let history = train_kd(&mut student, teacher, &synthetic.data.images, None, train, &kd, None)?;
    let (_, test_accuracy) = evaluate(&student, test, 256)?;
    Ok(DreamOutcome { student, synthetic, history, test_accuracy })
}
