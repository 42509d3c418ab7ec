//! Procedural image-classification data and the EDAI dataset file format.

mod edai;
mod shapes;

pub use edai::{decode_dataset, encode_dataset, load_dataset, save_dataset, EDAI_MAGIC};
pub use shapes::{gen_shapes, Motif, MotifSet, ShapesConfig, ALTERNATE, PRIMARY};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labelled images, `N×C×H×W` with values in `[0,1]`.
///
/// Class names and the train/test tag are not part of the binary format;
/// they travel in the sidecar written next to each file.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<u8>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::shape("dataset", format!("images must be NCHW, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape("dataset", format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::LabelOutOfRange { label: l as usize, classes });
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    /// Fails with [`Error::EmptyClass`] if any class has no image.
    pub fn require_all_classes(&self) -> Result<()> {
        match self.class_counts().iter().position(|&n| n == 0) {
            Some(c) => Err(Error::EmptyClass(c)),
            None => Ok(()),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let images = self.images.gather_outer(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Self::new(images, labels, self.classes)
    }

    /// Seeded per-class sample of `ceil(fraction·n_c)` images per class,
    /// returned in ascending index order.
    pub fn stratified_sample(&self, fraction: f64, seed: u64) -> Result<Vec<usize>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("fraction {fraction} outside (0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = Vec::new();
        for c in 0..self.classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] as usize == c).collect();
            members.shuffle(&mut rng);
            let take = ((members.len() as f64) * fraction).ceil() as usize;
            picked.extend_from_slice(&members[..take.min(members.len())]);
        }
        picked.sort_unstable();
        Ok(picked)
    }
}

/// One mini-batch: the gathered images and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Seeded permutation cut into batches of `batch` (the last may be short).
pub fn batch_order(n: usize, batch: usize, shuffle_seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn split_batches(ds: &Dataset, batch: usize, shuffle_seed: u64) -> Result<Vec<Batch>> {
    if batch == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    batch_order(ds.len(), batch, shuffle_seed)
        .into_iter()
        .map(|indices| {
            let images = ds.images.gather_outer(&indices)?;
            let labels = indices.iter().map(|&i| ds.labels[i] as usize).collect();
            Ok(Batch { indices, images, labels })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        gen_shapes(&ShapesConfig { size: 8, ..ShapesConfig::new(MotifSet::Primary, 3, 4, 0.1, 1) }).unwrap()
    }

    #[test]
    fn whole_batch_is_a_permutation() {
        let ds = tiny();
        let b = split_batches(&ds, ds.len(), 5).unwrap();
        assert_eq!(b.len(), 1);
        let mut idx = b[0].indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn batches_cover_dataset_deterministically() {
        let ds = tiny();
        let a = split_batches(&ds, 5, 7).unwrap();
        assert_eq!(a, split_batches(&ds, 5, 7).unwrap());
        assert_eq!(a.iter().map(|b| b.labels.len()).sum::<usize>(), ds.len());
        assert_eq!(a.last().unwrap().labels.len(), 2);
        assert!(split_batches(&ds, 0, 0).is_err());
    }

    #[test]
    fn stratified_fraction() {
        let ds = tiny();
        let s = ds.stratified_sample(0.5, 2).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(ds.subset(&s).unwrap().class_counts(), vec![2, 2, 2]);
        assert!(ds.stratified_sample(0.0, 2).is_err());
    }
}
