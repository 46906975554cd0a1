//! Shared training utilities: parameter initialization, the Adam optimizer,
//! and parameter-group checksums used by the freeze-contract assertions.

use crate::autodiff::Arr;
use crate::rng::fill_normal;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// He-style normal init for conv weights `[cout, cin, kh, kw]`.
pub fn conv_init(rng: &mut ChaCha8Rng, cout: usize, cin: usize, kh: usize, kw: usize) -> Arr {
    let std = (2.0 / (cin * kh * kw) as f64).sqrt();
    let mut a = ArrayD::zeros(IxDyn(&[cout, cin, kh, kw]));
    fill_normal(rng, a.as_slice_mut().unwrap());
    a.mapv_inplace(|v| v * std);
    a
}

/// Xavier-style normal init for dense weights `[fan_in, fan_out]`.
pub fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Arr {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let mut a = ArrayD::zeros(IxDyn(&[fan_in, fan_out]));
    fill_normal(rng, a.as_slice_mut().unwrap());
    a.mapv_inplace(|v| v * std);
    a
}

pub fn zeros(shape: &[usize]) -> Arr {
    ArrayD::zeros(IxDyn(shape))
}

/// Adam with bias correction. Moment buffers align with the parameter
/// ordering of the group it was built for; the step counter is part of the
/// serialized state so resumed runs continue bit-exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Arr>,
    pub v: Vec<Arr>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| zeros(s)).collect(),
            v: shapes.iter().map(|s| zeros(s)).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &[&Arr]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(lr, &shapes)
    }

    /// One update. `grads[i]` of `None` (an unused parameter this step)
    /// contributes a zero gradient, which still decays the moments.
    pub fn step(&mut self, params: &mut [&mut Arr], grads: &[Option<Arr>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let zero;
            let g = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = zeros(params[i].shape());
                    &zero
                }
            };
            assert_eq!(g.shape(), params[i].shape(), "gradient shape mismatch");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, gv| {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            });
            ndarray::Zip::from(&mut **params[i])
                .and(&*m)
                .and(&*v)
                .for_each(|p, mv, vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// SHA-256 over the exact f64 bit patterns of a parameter list. Used to
/// assert that a training step left a parameter group untouched.
pub fn params_checksum<'a>(params: impl IntoIterator<Item = &'a Arr>) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for p in params {
        for v in p.iter() {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    hasher.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        // f(p) = sum((p - 3)^2)
        let mut p = zeros(&[4]);
        let mut opt = Adam::for_params(0.1, &[&p]);
        for _ in 0..300 {
            let g = p.mapv(|v| 2.0 * (v - 3.0));
            opt.step(&mut [&mut p], &[Some(g)]);
        }
        for v in p.iter() {
            assert!((v - 3.0).abs() < 1e-3, "converged to {v}");
        }
    }

    #[test]
    fn checksum_detects_single_bit_change() {
        let mut rng = derive_rng(1, &[99]);
        let a = conv_init(&mut rng, 2, 2, 3, 3);
        let mut b = a.clone();
        let c1 = params_checksum([&a]);
        assert_eq!(c1, params_checksum([&b]));
        let v0 = b.as_slice_mut().unwrap()[0];
        b.as_slice_mut().unwrap()[0] = v0.next_up();
        assert_ne!(c1, params_checksum([&b]));
    }
}
