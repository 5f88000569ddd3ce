//! Brute-force Gibbs quantities by enumerating every configuration of the
//! unfrozen vertices. This is the ground truth the recursive engines are
//! checked against, so it shares nothing with them beyond [`Weights`].

use crate::dist::{normalize_weights, MarginalDistribution, RatioVector};
use crate::error::ComputeError;
use crate::model::{Model, Spin, Vertex, Weights};
use crate::num::Scalar;

pub const DEFAULT_MAX_ENUM_BITS: u32 = 24;

/// Enumeration guard: `q^(unfrozen vertices) <= 2^max_bits`.
#[derive(Clone, Copy, Debug)]
pub struct OracleConfig {
    pub max_bits: u32,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { max_bits: DEFAULT_MAX_ENUM_BITS }
    }
}

struct Enumerator<'a, S> {
    weights: &'a Weights<S>,
    order: Vec<Vertex>,
    /// Factors whose last unassigned vertex is `order[k]`.
    closing: Vec<Vec<usize>>,
    spins: Vec<Spin>,
}

impl<'a, S: Scalar> Enumerator<'a, S> {
    /// Returns the enumerator and the constant weight of the frozen part.
    fn new(model: &Model, weights: &'a Weights<S>, first: Option<Vertex>, cfg: &OracleConfig) -> Result<(Self, S), ComputeError> {
        let n = model.n();
        let q = model.q();
        let mut order: Vec<Vertex> = (0..n).filter(|&v| !model.boundary.is_frozen(v)).collect();
        if let Some(v) = first {
            order.retain(|&u| u != v);
            order.insert(0, v);
        }
        let needed_bits = order.len() as f64 * (q as f64).log2();
        if needed_bits > f64::from(cfg.max_bits) {
            return Err(ComputeError::EnumerationBudget { needed_bits, limit_bits: cfg.max_bits });
        }
        let mut position = vec![None; n];
        for (k, &v) in order.iter().enumerate() {
            position[v] = Some(k);
        }
        let mut spins = vec![0; n];
        let mut constant = S::one();
        for (v, s) in model.boundary.iter() {
            spins[v] = s;
            constant = constant.times(&weights.potentials[v][s]);
        }
        let mut closing = vec![Vec::new(); order.len()];
        for (idx, f) in weights.factors.iter().enumerate() {
            match f.vertices.iter().filter_map(|&v| position[v]).max() {
                Some(k) => closing[k].push(idx),
                None => {
                    let local: Vec<Spin> = f.vertices.iter().map(|&v| spins[v]).collect();
                    constant = constant.times(f.value(q, &local));
                }
            }
        }
        Ok((Enumerator { weights, order, closing, spins }, constant))
    }

    fn sum_from(&mut self, k: usize, partial: &S) -> S {
        if k == self.order.len() {
            return partial.clone();
        }
        let mut total = S::zero();
        for s in 0..self.weights.q {
            let w = self.extend(k, s, partial);
            if !w.is_zero() {
                total = total.plus(&self.sum_from(k + 1, &w));
            }
        }
        total
    }

    fn extend(&mut self, k: usize, s: Spin, partial: &S) -> S {
        let v = self.order[k];
        self.spins[v] = s;
        let q = self.weights.q;
        let mut w = partial.times(&self.weights.potentials[v][s]);
        let mut local = Vec::new();
        for &idx in &self.closing[k] {
            if w.is_zero() {
                break;
            }
            let f = &self.weights.factors[idx];
            local.clear();
            local.extend(f.vertices.iter().map(|&u| self.spins[u]));
            w = w.times(f.value(q, &local));
        }
        w
    }

    /// Unnormalized weight of each spin of `order[0]`.
    fn split_first(&mut self, constant: &S) -> Vec<S> {
        (0..self.weights.q)
            .map(|s| {
                let w = self.extend(0, s, constant);
                if w.is_zero() {
                    w
                } else {
                    self.sum_from(1, &w)
                }
            })
            .collect()
    }
}

/// `Z_G^Λ`: total weight of the configurations consistent with the boundary.
pub fn partition_function<S: Scalar>(model: &Model, cfg: &OracleConfig) -> Result<S, ComputeError> {
    let weights = model.weights::<S>();
    let (mut e, constant) = Enumerator::new(model, &weights, None, cfg)?;
    if constant.is_zero() {
        return Ok(S::zero());
    }
    Ok(e.sum_from(0, &constant))
}

/// Unnormalized spin weights of `v` (sums over consistent configurations).
pub fn marginal_weights<S: Scalar>(model: &Model, v: Vertex, cfg: &OracleConfig) -> Result<Vec<S>, ComputeError> {
    if v >= model.n() {
        return Err(ComputeError::VertexOutOfRange(v));
    }
    if model.boundary.is_frozen(v) {
        return Err(ComputeError::FrozenQueryVertex(v));
    }
    let weights = model.weights::<S>();
    let (mut e, constant) = Enumerator::new(model, &weights, Some(v), cfg)?;
    if constant.is_zero() {
        return Ok(vec![S::zero(); model.q()]);
    }
    Ok(e.split_first(&constant))
}

/// `P(x_v = s | X_Λ = σ_Λ)` for every spin `s`.
pub fn gibbs_marginal<S: Scalar>(model: &Model, v: Vertex, cfg: &OracleConfig) -> Result<MarginalDistribution<S>, ComputeError> {
    let w = marginal_weights::<S>(model, v, cfg)?;
    normalize_weights(&w).map_err(|_| ComputeError::ZeroPartitionFunction)
}

/// `P(v = s) / P(v = reference)`.
pub fn exact_ratio<S: Scalar>(model: &Model, v: Vertex, reference: Spin, cfg: &OracleConfig) -> Result<RatioVector<S>, ComputeError> {
    if reference >= model.q() {
        return Err(ComputeError::SpinOutOfRange(reference));
    }
    let marginal = gibbs_marginal::<S>(model, v, cfg)?;
    let base = marginal.probs[reference].clone();
    if base.is_zero() {
        return Err(ComputeError::ReferenceSpinHasZeroProbability(reference));
    }
    Ok(RatioVector { reference, ratios: marginal.probs.iter().map(|p| p.over(&base)).collect() })
}

/// Weight of one full configuration (every vertex assigned).
pub fn configuration_weight<S: Scalar>(weights: &Weights<S>, spins: &[Spin]) -> S {
    let mut w = S::one();
    for (v, &s) in spins.iter().enumerate() {
        w = w.times(&weights.potentials[v][s]);
    }
    for f in &weights.factors {
        let local: Vec<Spin> = f.vertices.iter().map(|&v| spins[v]).collect();
        w = w.times(f.value(weights.q, &local));
    }
    w
}
