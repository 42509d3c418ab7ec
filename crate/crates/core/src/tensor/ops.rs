//! Raw layer kernels on flat buffers. The tape wires these together.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::Real;
use crate::error::{Error, Result};

/// Output extent of a strided, zero-padded window.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub r: usize,
    pub s: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], bias: Option<&[usize]>, stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be NCHW, got {x:?}")));
        }
        if w.len() != 4 {
            return Err(Error::shape("conv2d", format!("weight must be KCRS, got {w:?}")));
        }
        if x[1] != w[1] {
            return Err(Error::shape(
                "conv2d",
                format!("channel dimension: input has C={}, weight expects C={}", x[1], w[1]),
            ));
        }
        if let Some(b) = bias {
            if b != [w[0]] {
                return Err(Error::shape("conv2d", format!("bias {b:?} does not match K={}", w[0])));
            }
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let oh = conv_out_extent(x[2], w[2], stride, pad).ok_or_else(|| {
            Error::shape("conv2d", format!("height: H+2·pad = {} < R = {}", x[2] + 2 * pad, w[2]))
        })?;
        let ow = conv_out_extent(x[3], w[3], stride, pad).ok_or_else(|| {
            Error::shape("conv2d", format!("width: W+2·pad = {} < S = {}", x[3] + 2 * pad, w[3]))
        })?;
        Ok(Self { n: x[0], c: x[1], h: x[2], w: x[3], k: w[0], r: w[2], s: w[3], stride, pad, oh, ow })
    }

    pub fn patch(&self) -> usize {
        self.c * self.r * self.s
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.k, self.oh, self.ow]
    }

    fn is_pointwise(&self) -> bool {
        self.r == 1 && self.s == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Lower one `C×H×W` image into a `(C·R·S)×(OH·OW)` column matrix.
fn im2col<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let p = g.out_plane();
    for c in 0..g.c {
        for r in 0..g.r {
            for s in 0..g.s {
                let row = &mut cols[((c * g.r + r) * g.s + s) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + r) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + s) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back into image layout.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let p = g.out_plane();
    for c in 0..g.c {
        for r in 0..g.r {
            for s in 0..g.s {
                let row = &cols[((c * g.r + r) * g.s + s) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + r) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + s) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (in_sz, p, kk) = (g.c * g.h * g.w, g.out_plane(), g.patch());
    let mut out = vec![T::zero(); g.n * g.k * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
    for i in 0..g.n {
        let img = &x[i * in_sz..(i + 1) * in_sz];
        let o = &mut out[i * g.k * p..(i + 1) * g.k * p];
        if g.is_pointwise() {
            gemm_nn(g.k, p, kk, w, img, o);
        } else {
            im2col(g, img, &mut cols);
            gemm_nn(g.k, p, kk, w, &cols, o);
        }
        if let Some(b) = b {
            for (plane, &bv) in o.chunks_exact_mut(p).zip(b) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Accumulates into whichever of `dx`, `dw`, `db` are present.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (in_sz, p, kk) = (g.c * g.h * g.w, g.out_plane(), g.patch());
    let mut cols = vec![T::zero(); kk * p];
    let mut dcols = vec![T::zero(); kk * p];
    for i in 0..g.n {
        let img = &x[i * in_sz..(i + 1) * in_sz];
        let dyi = &dy[i * g.k * p..(i + 1) * g.k * p];
        if let Some(dw) = dw.as_deref_mut() {
            if g.is_pointwise() {
                gemm_nt(g.k, kk, p, dyi, img, dw);
            } else {
                im2col(g, img, &mut cols);
                gemm_nt(g.k, kk, p, dyi, &cols, dw);
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxi = &mut dx[i * in_sz..(i + 1) * in_sz];
            if g.is_pointwise() {
                gemm_tn(kk, p, g.k, w, dyi, dxi);
            } else {
                dcols.fill(T::zero());
                gemm_tn(kk, p, g.k, w, dyi, &mut dcols);
                col2im(g, &dcols, dxi);
            }
        }
    }
    if let Some(db) = db {
        for i in 0..g.n {
            for (k, plane) in dy[i * g.k * p..(i + 1) * g.k * p].chunks_exact(p).enumerate() {
                db[k] += plane.iter().copied().sum::<T>();
            }
        }
    }
}

/// Row-wise log-softmax of an `N×L` buffer at temperature `tau`.
pub(crate) fn log_softmax_rows<T: Real>(x: &[T], l: usize, tau: T) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(l) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v / tau));
        let lse = row.iter().map(|&v| (v / tau - mx).exp()).sum::<T>().ln() + mx;
        out.extend(row.iter().map(|&v| v / tau - lse));
    }
    out
}

/// Channel-summed squared activations per sample, L2-normalised.
/// Returns the normalised maps and each sample's pre-normalisation norm
/// (zero norm means the map was left as all zeros).
pub(crate) fn attention_maps<T: Real>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let mut maps = vec![T::zero(); n * plane];
    let mut norms = vec![T::zero(); n];
    for i in 0..n {
        let a = &mut maps[i * plane..(i + 1) * plane];
        for ch in 0..c {
            let src = &x[(i * c + ch) * plane..][..plane];
            for (av, &v) in a.iter_mut().zip(src) {
                *av += v * v;
            }
        }
        let norm = a.iter().map(|&v| v * v).sum::<T>().sqrt();
        norms[i] = norm;
        if norm > T::zero() {
            a.iter_mut().for_each(|v| *v /= norm);
        }
    }
    (maps, norms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Result<Tensor<f64>> {
        let g = ConvGeom::new(x.shape(), w.shape(), b.map(|b| b.shape()), stride, pad)?;
        Tensor::new(&g.out_shape(), conv2d_forward(&g, x.data(), w.data(), b.map(|b| b.data())))
    }

    #[test]
    fn scalar_kernel_scales_input() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = t(&[1, 1, 1, 1], &[2.0]);
        let y = conv(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn diagonal_kernel_on_two_by_two() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = conv(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn strided_padded_shape() {
        let x = Tensor::<f64>::zeros(&[2, 3, 8, 8]);
        let w = Tensor::<f64>::zeros(&[4, 3, 3, 3]);
        assert_eq!(conv(&x, &w, None, 2, 1).unwrap().shape(), &[2, 4, 4, 4]);
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        let err = conv(&x, &w, None, 1, 0).unwrap_err().to_string();
        assert!(err.contains("channel"), "{err}");
        let w = Tensor::<f64>::zeros(&[1, 2, 5, 3]);
        let err = conv(&x, &w, None, 1, 0).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn attention_zero_map_stays_zero() {
        let (maps, norms) = attention_maps(&[0.0f64; 8], 1, 2, 4);
        assert!(maps.iter().all(|&v| v == 0.0));
        assert_eq!(norms, vec![0.0]);
    }
}
