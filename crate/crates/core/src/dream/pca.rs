use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Principal axes of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm eigenvectors of the sample covariance, by descending variance.
    pub components: Vec<Vec<f64>>,
    /// Square roots of the matching eigenvalues (clamped at zero).
    pub stds: Vec<f64>,
}

/// Sample covariance (divisor `M−1`) of `M` points in `D` dimensions.
pub fn covariance(points: &[f64], dim: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::shape("pca", format!("{} values is not a whole number of {dim}-vectors", points.len())));
    }
    let m = points.len() / dim;
    if m < 2 {
        return Err(Error::InvalidConfig(format!("pca needs at least 2 points, got {m}")));
    }
    let mut mean = vec![0.0; dim];
    for p in points.chunks_exact(dim) {
        mean.iter_mut().zip(p).for_each(|(a, &v)| *a += v);
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let centred = DMatrix::from_fn(m, dim, |i, j| points[i * dim + j] - mean[j]);
    let cov = centred.tr_mul(&centred) / (m as f64 - 1.0);
    Ok((mean, cov))
}

/// Top `min(p, M−1, D)` principal components.
pub fn pca(points: &[f64], dim: usize, p: usize) -> Result<Pca> {
    let (mean, cov) = covariance(points, dim)?;
    let m = points.len() / dim;
    let q = p.min(m - 1).min(dim);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(q);
    let mut stds = Vec::with_capacity(q);
    for &j in &order[..q] {
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        // fix the sign so the largest-magnitude coordinate is positive
        let lead = v.iter().enumerate().fold(0, |b, (i, x)| if x.abs() > v[b].abs() { i } else { b });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        stds.push(eig.eigenvalues[j].max(0.0).sqrt());
    }
    Ok(Pca { mean, components, stds })
}
