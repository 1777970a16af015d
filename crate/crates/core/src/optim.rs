//! Adam with bias correction and global-norm gradient clipping.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, ParameterSet, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step counter and first/second moments, one vector per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f64> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| alloc::vec![T::zero(); t.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Non-finite gradients abort before anything changes.
    pub fn update(&mut self, params: &mut ParameterSet<T>, grads: &[Vec<T>], hyper: &AdamHyper) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let (name, t) = params.entry(i);
            if g.len() != t.numel() {
                return Err(Error::ParamMismatch {
                    name: name.into(),
                    reason: format!("gradient has {} values, tensor {}", g.len(), t.numel()),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.into()));
            }
        }
        self.step += 1;
        let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
        let (lr, eps) = (T::of(hyper.lr), T::of(hyper.eps));
        let t = self.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (k, w) in p.values_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm<T: Real>(grads: &[Vec<T>]) -> T {
    grads
        .iter()
        .flatten()
        .fold(T::zero(), |a, &g| a + g * g)
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> T {
    let norm = global_norm(grads);
    let max = T::of(max_norm);
    if norm > max {
        let scale = max / norm;
        grads.iter_mut().flatten().for_each(|g| *g = *g * scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn one_param(x: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.push("w", Tensor::vector(alloc::vec![x])).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one_param(0.0);
        let mut adam = Adam::new(&p);
        let hyper = AdamHyper::default();
        adam.update(&mut p, &[alloc::vec![1.0]], &hyper).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = −lr / (1 + ε)
        let want = -hyper.lr / (1.0 + hyper.eps);
        assert!((p.get("w").unwrap().values()[0] - want).abs() < 1e-18);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_parameters_and_decays_moments() {
        let mut p = one_param(0.5);
        let mut adam = Adam::new(&p);
        let hyper = AdamHyper::default();
        adam.update(&mut p, &[alloc::vec![2.0]], &hyper).unwrap();
        let (m, v) = (adam.m[0][0], adam.v[0][0]);
        adam.update(&mut p, &[alloc::vec![0.0]], &hyper).unwrap();
        assert_eq!(adam.m[0][0], 0.9 * m);
        assert_eq!(adam.v[0][0], 0.999 * v);
        let mut fresh = one_param(0.5);
        let mut a2 = Adam::new(&fresh);
        a2.update(&mut fresh, &[alloc::vec![0.0]], &hyper).unwrap();
        assert_eq!(fresh.get("w").unwrap().values()[0], 0.5);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = one_param(0.0);
        let mut adam = Adam::new(&p);
        let err = adam
            .update(&mut p, &[alloc::vec![f64::NAN]], &AdamHyper::default())
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut g = alloc::vec![alloc::vec![3.0f64, 0.0], alloc::vec![4.0]];
        let norm = clip_global_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = alloc::vec![alloc::vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
