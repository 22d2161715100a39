//! Dense tensors and a tape-based reverse-mode differentiation graph.
//!
//! The graph supports exactly the primitives the model needs: matrix
//! multiply (covering matrix-vector, vector-matrix, and outer products
//! through degenerate dimensions), element-wise add and multiply, scalar
//! broadcast multiply, affine maps by constants, tanh, sigmoid, softmax,
//! clamped log, concatenate, slice, row mean, sum, and batched cosine
//! similarity. Every model expression composes from these.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{
    gradient_check, gradient_check_params, GradCheckEntry, GradCheckReport, DEFAULT_STEP,
    DEFAULT_TOLERANCE,
};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{Scalar, Tensor};

use crate::{Error, Result};

/// Numerically stable softmax over a slice: subtracts the maximum before
/// exponentiation so large magnitudes cannot overflow.
pub fn softmax<T: Scalar>(values: &[T]) -> Result<Vec<T>> {
    if values.is_empty() {
        return Err(Error::invalid("softmax of an empty slice"));
    }
    let mut max = values[0];
    for &v in &values[1..] {
        if v > max {
            max = v;
        }
    }
    let mut out: Vec<T> = values.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = T::zero();
    for &e in &out {
        sum += e;
    }
    for e in &mut out {
        *e = *e / sum;
    }
    Ok(out)
}

/// Standard normal draws via the Box-Muller transform, so the output
/// depends only on the generator stream and not on library internals.
pub(crate) struct Gaussian {
    spare: Option<f64>,
}

impl Gaussian {
    pub(crate) fn new() -> Self {
        Gaussian { spare: None }
    }

    pub(crate) fn next(&mut self, rng: &mut impl rand::Rng) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        // gen_range on (0, 1]: avoids ln(0).
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// Cosine similarity of two equal-length vectors. A zero-norm input yields
/// exactly zero; otherwise the result is clamped to [-1, 1] so downstream
/// code never sees values pushed outside the range by rounding.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cosine similarity of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("cosine similarity of empty vectors"));
    }
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == T::zero() || nb == T::zero() {
        return Ok(T::zero());
    }
    let c = dot / (na.sqrt() * nb.sqrt());
    Ok(c.min(T::one()).max(-T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Oracle values below were computed by hand with exact rationals or with
    // high-precision arithmetic, then rounded to f64.

    #[test]
    fn softmax_matches_hand_computed_values() {
        // exp(1), exp(2), exp(3) normalized.
        let out = softmax(&[1.0f64, 2.0, 3.0]).unwrap();
        let expected = [
            0.09003057317038046,
            0.24472847105479764,
            0.6652409557748219,
        ];
        for (o, e) in out.iter().zip(expected.iter()) {
            assert!((o - e).abs() < 1e-15, "got {o}, want {e}");
        }
    }

    #[test]
    fn softmax_is_invariant_to_constant_shift() {
        let a = softmax(&[0.3f64, -1.2, 2.5, 0.0]).unwrap();
        let b = softmax(&[100.3f64, 98.8, 102.5, 100.0]).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_large_magnitudes() {
        let out = softmax(&[1000.0f64, 0.0]).unwrap();
        assert!(out[0] > 0.999999999);
        assert!(out.iter().all(|v| v.is_finite()));
        let sum: f64 = out.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_empty_input() {
        assert!(softmax::<f64>(&[]).is_err());
    }

    #[test]
    fn cosine_of_identical_vectors_is_one() {
        let c = cosine_similarity(&[0.3f64, -0.7, 1.1], &[0.3, -0.7, 1.1]).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_matches_hand_computed_value() {
        // dot = 1, |a| = 1, |b| = sqrt(2), so cos = 1/sqrt(2).
        let c = cosine_similarity(&[1.0f64, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 0.7071067811865475).abs() < 1e-15);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        let c = cosine_similarity(&[0.0f64, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn cosine_rejects_mismatched_lengths() {
        assert!(cosine_similarity(&[1.0f64], &[1.0, 2.0]).is_err());
    }
}
