use super::{Real, Tensor};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + λ·p`, `p ← p − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real = f32> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        Self { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    /// Apply one update to every parameter, then clear their gradients.
    /// Fails before touching anything if a parameter lacks a gradient.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(i));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let g = p.grad.take().expect("checked above");
            let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::new(&[1], vec![v]).unwrap();
        t.grad = Some(vec![g]);
        t
    }

    #[test]
    fn plain_step() {
        let mut p = [param(1.0, 0.5)];
        Sgd::new(1.0, 0.0, 0.0).step(&mut p).unwrap();
        assert_eq!(p[0].data(), &[0.5]);
        assert!(p[0].grad.is_none());
    }

    #[test]
    fn momentum_recurrence() {
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        let mut p = [param(0.0, 1.0)];
        opt.step(&mut p).unwrap();
        assert!((p[0].data()[0] + 0.1).abs() < 1e-15);
        p[0].grad = Some(vec![1.0]);
        opt.step(&mut p).unwrap();
        assert!((p[0].data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = [param(3.25, 0.0)];
        Sgd::new(0.7, 0.9, 0.0).step(&mut p).unwrap();
        assert_eq!(p[0].data(), &[3.25]);
    }

    #[test]
    fn missing_grad_is_reported() {
        let mut p = [param(1.0, 1.0), Tensor::new(&[1], vec![2.0]).unwrap()];
        assert!(matches!(Sgd::new(0.1, 0.0, 0.0).step(&mut p), Err(Error::MissingGrad(1))));
        assert_eq!(p[0].data(), &[1.0]);
    }
}
