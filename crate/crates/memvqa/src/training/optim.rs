//! Optimizer pieces: Adam with bias correction, gradient clipping, and
//! annealed Gaussian gradient noise.

use super::{derive_seed, STREAM_NOISE};
use crate::numeric::{Gaussian, Gradients, Scalar, Tensor};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// One in-place Adam update. `t` is the 1-based update count shared by all
/// parameters; the bias-correction denominators are computed in f64 and
/// cast once so low-precision runs keep an accurate schedule.
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: f64,
    t: u64,
) {
    assert_eq!(param.len(), grad.len());
    assert_eq!(param.len(), m.len());
    assert_eq!(param.len(), v.len());
    assert!(t >= 1, "Adam step count is 1-based");
    let b1 = T::of(ADAM_BETA1);
    let b2 = T::of(ADAM_BETA2);
    let one = T::one();
    let corr1 = T::of(1.0 - ADAM_BETA1.powf(t as f64));
    let corr2 = T::of(1.0 - ADAM_BETA2.powf(t as f64));
    let lr = T::of(lr);
    let eps = T::of(ADAM_EPSILON);
    for i in 0..param.len() {
        m[i] = b1 * m[i] + (one - b1) * grad[i];
        v[i] = b2 * v[i] + (one - b2) * grad[i] * grad[i];
        let m_hat = m[i] / corr1;
        let v_hat = v[i] / corr2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam state over named tensors. Moment buffers appear lazily the first
/// time a parameter is updated, keyed by its canonical name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamOptimizer<T: Scalar> {
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    t: u64,
}

impl<T: Scalar> Default for AdamOptimizer<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> AdamOptimizer<T> {
    pub fn new() -> Self {
        AdamOptimizer {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// Rebuilds optimizer state from checkpointed moments.
    pub fn from_state(
        m: BTreeMap<String, Tensor<T>>,
        v: BTreeMap<String, Tensor<T>>,
        t: u64,
    ) -> Result<Self> {
        if m.len() != v.len() || m.keys().zip(v.keys()).any(|(a, b)| a != b) {
            return Err(Error::invalid(
                "Adam moment maps must hold the same parameter names",
            ));
        }
        for (name, mt) in &m {
            if mt.shape() != v[name].shape() {
                return Err(Error::invalid(format!(
                    "Adam moment shapes disagree for {name}"
                )));
            }
        }
        Ok(AdamOptimizer { m, v, t })
    }

    /// Advances the shared step count. Call once per optimization step,
    /// before the per-parameter updates.
    pub fn begin_step(&mut self) -> u64 {
        self.t += 1;
        self.t
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor<T>>, &BTreeMap<String, Tensor<T>>) {
        (&self.m, &self.v)
    }

    /// Applies one Adam update to a named parameter.
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
        if self.t == 0 {
            return Err(Error::invalid("begin_step must run before update"));
        }
        if grad.shape() != param.shape() {
            return Err(Error::invalid(format!(
                "gradient shape {:?} does not match parameter {name} shape {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        if !grad.all_finite() {
            return Err(Error::NonFiniteGradient {
                name: name.to_string(),
            });
        }
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        adam_update(
            param.data_mut(),
            grad.data(),
            m.data_mut(),
            v.data_mut(),
            lr,
            self.t,
        );
        if !param.all_finite() {
            return Err(Error::NonFiniteGradient {
                name: name.to_string(),
            });
        }
        Ok(())
    }
}

/// Scales all gradients together so their global L2 norm does not exceed
/// `max_magnitude`. Returns the pre-clip norm. The norm accumulates in f64
/// in name order, so the result is deterministic for a given map.
pub fn clip_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_magnitude: f64) -> Result<f64> {
    if !(max_magnitude > 0.0) {
        return Err(Error::invalid("clip magnitude must be positive"));
    }
    let mut sum_sq = 0.0f64;
    for (_, g) in grads.iter() {
        for &x in g.data() {
            let v = x.as_f64();
            sum_sq += v * v;
        }
    }
    let norm = sum_sq.sqrt();
    if norm > max_magnitude {
        let scale = T::of(max_magnitude / norm);
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    Ok(norm)
}

/// Clamps every gradient element to [-max_magnitude, max_magnitude].
/// Returns the largest absolute element seen before clamping.
pub fn clip_per_element<T: Scalar>(grads: &mut Gradients<T>, max_magnitude: f64) -> Result<f64> {
    if !(max_magnitude > 0.0) {
        return Err(Error::invalid("clip magnitude must be positive"));
    }
    let hi = T::of(max_magnitude);
    let lo = T::of(-max_magnitude);
    let mut largest = 0.0f64;
    for (_, g) in grads.iter_mut() {
        for x in g.data_mut() {
            largest = largest.max(x.as_f64().abs());
            *x = (*x).min(hi).max(lo);
        }
    }
    Ok(largest)
}

/// Adds zero-mean Gaussian noise with variance eta / (1 + step)^exponent to
/// every gradient element. `step` is 1-based like the Adam count. The noise
/// stream depends only on (seed, step) and the name order of the map.
pub fn add_gradient_noise<T: Scalar>(
    grads: &mut Gradients<T>,
    seed: u64,
    step: u64,
    eta: f64,
    exponent: f64,
) -> Result<()> {
    if eta < 0.0 || !eta.is_finite() {
        return Err(Error::invalid("noise eta must be finite and non-negative"));
    }
    if step == 0 {
        return Err(Error::invalid("noise step count is 1-based"));
    }
    if eta == 0.0 {
        return Ok(());
    }
    let std = (eta / (1.0 + step as f64).powf(exponent)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_NOISE, step));
    let mut gauss = Gaussian::new();
    for (_, g) in grads.iter_mut() {
        for x in g.data_mut() {
            *x += T::of(std * gauss.next(&mut rng));
        }
    }
    Ok(())
}
