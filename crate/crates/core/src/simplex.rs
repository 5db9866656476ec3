//! Sparsity-inducing optimization on the probability simplex.
//!
//! The projection used here is not the Euclidean one: it clamps negative
//! coordinates to zero and rescales the rest to unit mass. Clamping yields
//! literal `0.0` entries, so "was this candidate pruned" is decided exactly.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, DarcError, Result};
use crate::scalar::Scalar;

/// Mixture weights over `J` candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AlphaVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> AlphaVector<T> {
    pub fn uniform(j: usize) -> Self {
        assert!(j > 0, "alpha over an empty candidate set");
        let w = T::one() / T::from_count(j);
        Self { values: vec![w; j] }
    }

    pub fn one_hot(j: usize, hot: usize) -> Self {
        let mut values = vec![T::zero(); j];
        values[hot] = T::one();
        Self { values }
    }

    /// Accepts `values` only if they already lie on the simplex.
    pub fn from_simplex(values: Vec<T>) -> Result<Self> {
        if values.is_empty() || !on_simplex(&values) {
            return dim_err(format!("{values:?} is not on the probability simplex"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub(crate) fn from_raw(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Indices with strictly positive weight.
    pub fn support(&self) -> Vec<usize> {
        (0..self.values.len())
            .filter(|&j| self.values[j] > T::zero())
            .collect()
    }

    /// Index of the largest weight (lowest index on ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }
}

pub(crate) fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = j;
        }
    }
    best
}

/// Non-negative and summing to one up to a few ulps per coordinate.
fn on_simplex<T: Scalar>(values: &[T]) -> bool {
    if values.iter().any(|&v| v < T::zero() || !v.is_finite()) {
        return false;
    }
    let sum: T = values.iter().copied().sum();
    (sum - T::one()).abs() <= T::epsilon() * T::from_count(4 * values.len())
}

/// `α₊ / ‖α₊‖₁`: negative entries become exactly zero, the rest are rescaled
/// to unit mass. Inputs already on the simplex are returned unchanged, which
/// makes the map exactly idempotent in floating point.
pub fn project_simplex<T: Scalar>(alpha: &[T]) -> Result<AlphaVector<T>> {
    if alpha.iter().any(|v| v.is_nan()) {
        return Err(DarcError::ProjectionUndefined(
            alpha.iter().map(|v| v.as_f64()).collect(),
        ));
    }
    if !alpha.is_empty() && on_simplex(alpha) {
        return Ok(AlphaVector {
            values: alpha.to_vec(),
        });
    }
    let clamped: Vec<T> = alpha
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    let mass: T = clamped.iter().copied().sum();
    if !(mass > T::zero()) || !mass.is_finite() {
        return Err(DarcError::ProjectionUndefined(
            alpha.iter().map(|v| v.as_f64()).collect(),
        ));
    }
    Ok(AlphaVector {
        values: clamped.into_iter().map(|v| v / mass).collect(),
    })
}

/// Gradient of `loss + λ·Σ_j C_j α_j` with respect to α, given the loss part.
pub fn penalized_alpha_grad<T: Scalar>(loss_grad: &[T], costs: &[T], lambda: T) -> Vec<T> {
    debug_assert_eq!(loss_grad.len(), costs.len());
    loss_grad
        .iter()
        .zip(costs)
        .map(|(&g, &c)| g + lambda * c)
        .collect()
}

/// One projected gradient step `P(α − η·grad)`.
pub fn projected_step<T: Scalar>(alpha: &AlphaVector<T>, grad: &[T], eta: T) -> Result<AlphaVector<T>> {
    if grad.len() != alpha.len() {
        return dim_err(format!(
            "gradient of length {} for alpha of length {}",
            grad.len(),
            alpha.len()
        ));
    }
    let moved: Vec<T> = alpha
        .values
        .iter()
        .zip(grad)
        .map(|(&a, &g)| a - eta * g)
        .collect();
    project_simplex(&moved)
}
