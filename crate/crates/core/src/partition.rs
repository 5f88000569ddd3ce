//! Engine dispatch for single-vertex marginals, and the partition function
//! as a telescoping product of conditional marginals.

use std::fmt;
use std::str::FromStr;

use crate::dist::MarginalDistribution;
use crate::error::ComputeError;
use crate::eval::{cdtree_marginal, BoundaryInitialization, Strategy};
use crate::model::{Model, Spin, Vertex};
use crate::num::{Rational, Scalar};
use crate::oracle::{configuration_weight, gibbs_marginal, OracleConfig};
use crate::recursion::{hyper_marginal, split_marginal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Engine {
    /// Brute-force enumeration.
    Exact,
    /// Untruncated CD tree (pairwise graphs only).
    #[default]
    CdTree,
    /// Vertex splitting; the joint recursion on hypergraphs.
    Split,
}

impl FromStr for Engine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exact" | "oracle" => Ok(Engine::Exact),
            "cdtree" => Ok(Engine::CdTree),
            "split" => Ok(Engine::Split),
            other => Err(format!("unknown engine {other:?} (expected exact, cdtree or split)")),
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Exact => "exact",
            Engine::CdTree => "cdtree",
            Engine::Split => "split",
        })
    }
}

/// Exact marginal at `v` with the chosen engine.
///
/// The recursive engines never look at factors between two frozen vertices
/// or at components away from `v`, so they can produce a distribution for a
/// boundary that admits no configuration at all. A feasibility search guards
/// both that case and the `NoFeasibleReference` breakdown, which it tells
/// apart from an empty Gibbs measure (`ZeroPartitionFunction`).
pub fn engine_marginal<S: Scalar>(
    model: &Model,
    v: Vertex,
    engine: Engine,
    cfg: &OracleConfig,
) -> Result<MarginalDistribution<S>, ComputeError> {
    let out = match engine {
        Engine::Exact => return gibbs_marginal(model, v, cfg),
        Engine::CdTree => {
            cdtree_marginal(model, v, None, None, &BoundaryInitialization::AllOnes, Strategy::Memoized).map(|(m, _, _)| m)
        }
        Engine::Split if model.structure.as_graph().is_some() => split_marginal(model, v, None).map(|(m, _, _)| m),
        Engine::Split => hyper_marginal(model, v),
    };
    match out {
        Ok(_) | Err(ComputeError::NoFeasibleReference) if find_consistent(model).is_none() => {
            Err(ComputeError::ZeroPartitionFunction)
        }
        other => other,
    }
}

/// Some configuration of positive weight that extends the boundary.
///
/// Backtracking with forward checking: each vertex keeps the set of spins
/// not yet ruled out by a factor whose other vertices are all assigned, and
/// the vertex with the fewest remaining spins is assigned next.
pub fn find_consistent(model: &Model) -> Option<Vec<Spin>> {
    let w = model.weights::<Rational>();
    let n = model.n();
    let q = model.q();
    let mut spins: Vec<Option<Spin>> = (0..n).map(|v| model.boundary.get(v)).collect();
    let mut domains: Vec<Vec<bool>> = (0..n)
        .map(|v| match spins[v] {
            Some(s) => (0..q).map(|t| t == s).collect(),
            None => (0..q).map(|t| !w.potentials[v][t].is_zero()).collect(),
        })
        .collect();
    if (0..n).any(|v| spins[v].is_some_and(|s| w.potentials[v][s].is_zero())) {
        return None;
    }
    // Factors over frozen vertices only, then pruning around the boundary.
    let search = Search { w: &w, q };
    for f in &w.factors {
        let local: Option<Vec<Spin>> = f.vertices.iter().map(|&u| spins[u]).collect();
        if local.is_some_and(|l| f.value(q, &l).is_zero()) {
            return None;
        }
    }
    let frozen: Vec<Vertex> = (0..n).filter(|&v| spins[v].is_some()).collect();
    for v in frozen {
        search.prune(v, &spins, &mut domains)?;
    }
    search.assign(&mut spins, &mut domains).then(|| spins.into_iter().map(|s| s.expect("complete")).collect())
}

struct Search<'a> {
    w: &'a crate::model::Weights<Rational>,
    q: usize,
}

impl Search<'_> {
    /// Remove spins made impossible by `v`'s assignment from vertices that
    /// are the last unassigned member of a factor at `v`. Returns the
    /// removed (vertex, spin) pairs, or `None` if a domain empties (the
    /// removals are undone in that case).
    fn prune(&self, v: Vertex, spins: &[Option<Spin>], domains: &mut [Vec<bool>]) -> Option<Vec<(Vertex, Spin)>> {
        let mut removed = Vec::new();
        for &fi in &self.w.incident[v] {
            let f = &self.w.factors[fi];
            let open: Vec<usize> = (0..f.vertices.len()).filter(|&k| spins[f.vertices[k]].is_none()).collect();
            let [k] = open[..] else { continue };
            let u = f.vertices[k];
            let mut local: Vec<Spin> = f.vertices.iter().map(|&x| spins[x].unwrap_or(0)).collect();
            for (t, allowed) in domains[u].iter_mut().enumerate() {
                local[k] = t;
                if *allowed && f.value(self.q, &local).is_zero() {
                    *allowed = false;
                    removed.push((u, t));
                }
            }
            if !domains[u].contains(&true) {
                undo(domains, &removed);
                return None;
            }
        }
        Some(removed)
    }

    fn assign(&self, spins: &mut [Option<Spin>], domains: &mut [Vec<bool>]) -> bool {
        let next = (0..spins.len())
            .filter(|&v| spins[v].is_none())
            .min_by_key(|&v| domains[v].iter().filter(|&&d| d).count());
        let Some(v) = next else { return true };
        for s in 0..self.q {
            if !domains[v][s] {
                continue;
            }
            spins[v] = Some(s);
            if let Some(removed) = self.prune(v, spins, domains) {
                if self.assign(spins, domains) {
                    return true;
                }
                undo(domains, &removed);
            }
        }
        spins[v] = None;
        false
    }
}

fn undo(domains: &mut [Vec<bool>], removed: &[(Vertex, Spin)]) {
    for &(u, t) in removed {
        domains[u][t] = true;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Telescoping<S> {
    pub z: S,
    /// Vertices in the order they were frozen, with the spin chosen.
    pub steps: Vec<(Vertex, Spin)>,
}

/// `Z^Λ = w(x) / Π_k P(v_k = x_k | x_1..x_{k-1})` for the configuration `x`
/// built one vertex at a time.
///
/// Each step takes the lowest-numbered remaining vertex the engine can
/// handle and the first spin of positive marginal probability. A boundary
/// that admits no configuration gives `Z = 0`.
pub fn partition_telescoping<S: Scalar>(model: &Model, engine: Engine, cfg: &OracleConfig) -> Result<Telescoping<S>, ComputeError> {
    if find_consistent(model).is_none() {
        return Ok(Telescoping { z: S::zero(), steps: Vec::new() });
    }
    let mut cur = model.clone();
    let mut remaining: Vec<Vertex> = (0..model.n()).filter(|&v| !model.boundary.is_frozen(v)).collect();
    let mut steps = Vec::new();
    let mut prob = S::one();
    while !remaining.is_empty() {
        let mut picked = None;
        let mut last = None;
        for (k, &v) in remaining.iter().enumerate() {
            match engine_marginal::<S>(&cur, v, engine, cfg) {
                Ok(p) => {
                    picked = Some((k, v, p));
                    break;
                }
                Err(e @ (ComputeError::NoFeasibleReference | ComputeError::ZeroDenominator { .. })) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        let Some((k, v, p)) = picked else {
            return Err(last.expect("at least one vertex was tried"));
        };
        let s = p.probs.iter().position(|x| !x.is_zero()).ok_or(ComputeError::AllZeroRatios)?;
        prob = prob.times(&p.probs[s]);
        cur = cur.with_boundary(cur.boundary.with(v, s)).map_err(|e| ComputeError::InvalidArgument(e.to_string()))?;
        remaining.remove(k);
        steps.push((v, s));
    }
    let spins: Vec<Spin> = (0..model.n()).map(|v| cur.boundary.get(v).expect("every vertex frozen")).collect();
    let w = configuration_weight(&model.weights::<S>(), &spins);
    Ok(Telescoping { z: w.over(&prob), steps })
}
