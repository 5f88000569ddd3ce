//! Marginal distributions and ratio vectors.

use serde_json::Value;

use crate::error::ComputeError;
use crate::model::Spin;
use crate::num::Scalar;

/// Probability of each spin at one vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalDistribution<S> {
    pub probs: Vec<S>,
}

impl<S: Scalar> MarginalDistribution<S> {
    pub fn point_mass(q: usize, spin: Spin) -> Self {
        MarginalDistribution { probs: (0..q).map(|s| if s == spin { S::one() } else { S::zero() }).collect() }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.probs.iter().map(Scalar::to_f64).collect()
    }

    pub fn to_json(&self) -> Value {
        Value::Array(self.probs.iter().map(Scalar::to_json).collect())
    }

    /// Max-norm distance in doubles.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Ratios `P(v = s) / P(v = reference)`; `ratios[reference]` is one.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioVector<S> {
    pub reference: Spin,
    pub ratios: Vec<S>,
}

impl<S: Scalar> RatioVector<S> {
    pub fn to_json(&self) -> Value {
        Value::Array(self.ratios.iter().map(Scalar::to_json).collect())
    }
}

/// Rescale non-negative weights so they sum to one.
pub fn normalize_weights<S: Scalar>(weights: &[S]) -> Result<MarginalDistribution<S>, ComputeError> {
    let total = weights.iter().fold(S::zero(), |acc, w| acc.plus(w));
    if total.is_zero() {
        return Err(ComputeError::AllZeroRatios);
    }
    Ok(MarginalDistribution { probs: weights.iter().map(|w| w.over(&total)).collect() })
}

/// `probs[s] = r[s] / sum(r)`.
pub fn normalize<S: Scalar>(r: &RatioVector<S>) -> Result<MarginalDistribution<S>, ComputeError> {
    normalize_weights(&r.ratios)
}
