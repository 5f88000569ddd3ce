//! Exact ratios without building a tree, by splitting the query vertex.
//!
//! The query vertex `v` is replaced by one copy per incident factor. The ratio
//! `P(v=s)/P(v=ref)` then telescopes into one term per copy: term `i` compares
//! copy `i` at `s` against copy `i` at `ref`, with copies before `i` pinned to
//! `s` and copies after `i` pinned to `ref`. Each term only needs the
//! distribution of the other members of factor `i` in the smaller system where
//! `v` is gone, which is computed recursively on their connected component.
//!
//! For graphs the other member is a single neighbour and its ratio vector is
//! used directly. For hypergraphs the joint distribution of the other members
//! is assembled from single-vertex marginals by the chain rule.

use std::collections::HashMap;

use crate::dist::{normalize_weights, MarginalDistribution, RatioVector};
use crate::error::ComputeError;
use crate::model::{Model, Spin, Vertex, Weights};
use crate::num::Scalar;

/// Remaining system: unfrozen vertices plus every factor that still touches
/// one of them, with its already-fixed members pinned.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct State {
    alive: u64,
    /// `(factor index, pin per member)`, sorted by factor index; `None`
    /// marks a member that is still alive.
    factors: Vec<(usize, Vec<Option<Spin>>)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    /// Pairwise factors; neighbour ratio vectors are used as weights.
    Pairwise,
    /// Arbitrary arity; joint distributions via the chain rule.
    Joint,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RecursionStats {
    /// Ratio-vector computations performed (memo hits excluded).
    pub calls: u64,
    pub max_depth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecursionOptions {
    pub memoize: bool,
}

impl Default for RecursionOptions {
    fn default() -> Self {
        RecursionOptions { memoize: true }
    }
}

struct Engine<'a, S> {
    w: &'a Weights<S>,
    /// Splitting order of factors around a vertex.
    order_key: Vec<u32>,
    mode: Mode,
    options: RecursionOptions,
    memo: HashMap<(State, Vertex, Spin), Vec<S>>,
    path: Vec<Vertex>,
    stats: RecursionStats,
}

impl<'a, S: Scalar> Engine<'a, S> {
    fn new(model: &Model, w: &'a Weights<S>, mode: Mode, options: RecursionOptions) -> Result<Self, ComputeError> {
        if model.n() > 64 {
            return Err(ComputeError::InvalidArgument("split recursion supports at most 64 vertices".into()));
        }
        let order_key = match model.structure.as_graph() {
            Some(g) => g.labels().to_vec(),
            None => (0..w.factors.len() as u32).collect(),
        };
        Ok(Engine { w, order_key, mode, options, memo: HashMap::new(), path: Vec::new(), stats: RecursionStats::default() })
    }

    fn q(&self) -> usize {
        self.w.q
    }

    /// Initial state of a model; `None` when a fully frozen factor is zero.
    fn initial_state(&self, model: &Model) -> Option<State> {
        let mut alive = 0u64;
        for v in 0..model.n() {
            if !model.boundary.is_frozen(v) {
                alive |= 1 << v;
            }
        }
        let mut factors = Vec::new();
        for (idx, f) in self.w.factors.iter().enumerate() {
            let pins: Vec<Option<Spin>> = f.vertices.iter().map(|&v| model.boundary.get(v)).collect();
            if pins.iter().all(Option::is_some) {
                if self.fixed_value(idx, &pins).is_zero() {
                    return None;
                }
            } else {
                factors.push((idx, pins));
            }
        }
        Some(State { alive, factors })
    }

    fn fixed_value(&self, idx: usize, pins: &[Option<Spin>]) -> &S {
        let spins: Vec<Spin> = pins.iter().map(|p| p.expect("fully pinned")).collect();
        self.w.factors[idx].value(self.q(), &spins)
    }

    /// The part of `state` connected to `v`.
    fn component(&self, state: &State, v: Vertex) -> State {
        let mut comp = 1u64 << v;
        let mut changed = true;
        while changed {
            changed = false;
            for (idx, pins) in &state.factors {
                let members = self.alive_mask(*idx, pins);
                if members & comp != 0 && members & !comp != 0 {
                    comp |= members;
                    changed = true;
                }
            }
        }
        let factors = state
            .factors
            .iter()
            .filter(|(idx, pins)| self.alive_mask(*idx, pins) & comp != 0)
            .cloned()
            .collect();
        State { alive: state.alive & comp, factors }
    }

    fn alive_mask(&self, idx: usize, pins: &[Option<Spin>]) -> u64 {
        self.w.factors[idx]
            .vertices
            .iter()
            .zip(pins)
            .filter(|(_, p)| p.is_none())
            .fold(0, |m, (&v, _)| m | 1 << v)
    }

    /// Kill `v`, pinning it to `spin_of(k)` in the `k`-th of its factors
    /// (factor `skip` is dropped instead). Factors that become fully pinned
    /// are dropped; with `check_fixed`, `None` is returned if one of them is
    /// zero.
    fn pin(
        &self,
        state: &State,
        v: Vertex,
        spin_of: impl Fn(usize) -> Spin,
        skip: Option<usize>,
        check_fixed: bool,
    ) -> Option<State> {
        let mut factors = Vec::with_capacity(state.factors.len());
        let mut k = 0;
        for (idx, pins) in &state.factors {
            let Some(pos) = self.member_pos(*idx, pins, v) else {
                factors.push((*idx, pins.clone()));
                continue;
            };
            let this = k;
            k += 1;
            if Some(*idx) == skip {
                continue;
            }
            let mut pins = pins.clone();
            pins[pos] = Some(spin_of(this));
            if pins.iter().all(Option::is_some) {
                if check_fixed && self.fixed_value(*idx, &pins).is_zero() {
                    return None;
                }
            } else {
                factors.push((*idx, pins));
            }
        }
        Some(State { alive: state.alive & !(1 << v), factors })
    }

    fn member_pos(&self, idx: usize, pins: &[Option<Spin>], v: Vertex) -> Option<usize> {
        let pos = self.w.factors[idx].vertices.iter().position(|&u| u == v)?;
        pins[pos].is_none().then_some(pos)
    }

    fn zero_denominator(&self, reference: Spin) -> ComputeError {
        ComputeError::ZeroDenominator { reference, path: self.path.clone() }
    }

    /// Weights proportional to `P(v = s)` in `state`, in an arbitrary scale.
    fn weights(&mut self, state: &State, v: Vertex, pivot: Spin) -> Result<Vec<S>, ComputeError> {
        let state = self.component(state, v);
        let key = (state, v, pivot);
        if self.options.memoize {
            if let Some(hit) = self.memo.get(&key) {
                return Ok(hit.clone());
            }
        }
        self.path.push(v);
        self.stats.calls += 1;
        self.stats.max_depth = self.stats.max_depth.max(self.path.len());
        let out = self.weights_uncached(&key.0, v, pivot);
        self.path.pop();
        let out = out?;
        if self.options.memoize {
            self.memo.insert(key, out.clone());
        }
        Ok(out)
    }

    fn weights_uncached(&mut self, state: &State, v: Vertex, pivot: Spin) -> Result<Vec<S>, ComputeError> {
        let q = self.q();
        let mut w = self.w.potentials[v].clone();
        // Factors around v as positions in state.factors, in splitting order.
        let mut incident: Vec<usize> = (0..state.factors.len())
            .filter(|&k| {
                let (idx, pins) = &state.factors[k];
                self.member_pos(*idx, pins, v).is_some()
            })
            .collect();
        let by_state = incident.clone();
        incident.sort_by_key(|&k| self.order_key[state.factors[k].0]);
        // Rank of the nth incident factor in state order, the order `pin`
        // visits them in.
        let rank: Vec<usize> = by_state.iter().map(|k| incident.iter().position(|x| x == k).expect("incident")).collect();

        let terms: Vec<Term> = incident.iter().map(|&k| self.term(state, v, k)).collect();
        let mut independent: Vec<Option<JointWeights<S>>> = vec![None; terms.len()];
        let order = (0..q).filter(|&s| s != pivot).chain(std::iter::once(pivot));
        for s in order {
            if w[s].is_zero() {
                continue;
            }
            for (i, t) in terms.iter().enumerate() {
                if t.dependent {
                    continue;
                }
                if independent[i].is_none() {
                    let sub = self.split(state, v, &rank, i, s, pivot, t.factor);
                    independent[i] = Some(self.joint(&sub, &t.others_vertices(), pivot)?);
                }
                let dist = independent[i].as_ref().expect("just filled");
                w[s] = w[s].times(&self.contract(t, s, dist));
                if w[s].is_zero() {
                    break;
                }
            }
            if s == pivot || w[s].is_zero() {
                continue;
            }
            // Terms that see the other copies: telescoping ratios against
            // the pivot, each in its own context.
            for (i, t) in terms.iter().enumerate() {
                if !t.dependent {
                    continue;
                }
                let sub = self.split(state, v, &rank, i, s, pivot, t.factor);
                let dist = self.joint(&sub, &t.others_vertices(), pivot)?;
                let num = self.contract(t, s, &dist);
                let den = self.contract(t, pivot, &dist);
                if den.is_zero() {
                    return Err(self.zero_denominator(pivot));
                }
                w[s] = w[s].times(&num.over(&den));
            }
        }
        Ok(w)
    }

    /// Describe the term of factor `state.factors[k]` in the split of `v`.
    fn term(&self, state: &State, v: Vertex, k: usize) -> Term {
        let (idx, pins) = state.factors[k].clone();
        let others: Vec<(usize, Vertex)> = self.w.factors[idx]
            .vertices
            .iter()
            .enumerate()
            .filter(|&(pos, &u)| u != v && pins[pos].is_none())
            .map(|(pos, &u)| (pos, u))
            .collect();
        let v_pos = self.member_pos(idx, &pins, v).expect("incident");
        // The term depends on the spin of v when the other members can reach
        // another copy of v without passing through v.
        let mut without_v = State { alive: state.alive & !(1 << v), factors: Vec::new() };
        let mut copies = 0u64;
        for (i, p) in &state.factors {
            if *i == idx {
                continue;
            }
            let mut p = p.clone();
            if let Some(pos) = self.member_pos(*i, &p, v) {
                p[pos] = Some(0);
                copies |= self.alive_mask(*i, &p);
            }
            without_v.factors.push((*i, p));
        }
        let mut reach = 0u64;
        for &(_, u) in &others {
            reach |= self.component(&without_v, u).alive;
        }
        let dependent = copies & reach != 0;
        Term { factor: idx, pins, others, v_pos, dependent }
    }

    /// The system for term `i` at spin `s`: `v` removed, earlier copies at
    /// `s`, later copies at the pivot, factor `factor` dropped. Copies left
    /// alone in a factor only contribute their own term, so such factors are
    /// dropped rather than evaluated.
    #[allow(clippy::too_many_arguments)]
    fn split(&self, state: &State, v: Vertex, rank: &[usize], i: usize, s: Spin, pivot: Spin, factor: usize) -> State {
        self.pin(state, v, |nth| if rank[nth] < i { s } else { pivot }, Some(factor), false)
            .expect("unchecked pinning always succeeds")
    }

    /// `Σ_x Φ(v = s, others = x) dist(x)` for one term.
    fn contract(&self, t: &Term, s: Spin, dist: &[(Vec<Spin>, S)]) -> S {
        let q = self.q();
        let mut spins: Vec<Spin> = t.pins.iter().map(|p| p.unwrap_or(0)).collect();
        spins[t.v_pos] = s;
        let mut acc = S::zero();
        for (xs, weight) in dist {
            for (&(pos, _), &x) in t.others.iter().zip(xs) {
                spins[pos] = x;
            }
            acc = acc.plus(&self.w.factors[t.factor].value(q, &spins).times(weight));
        }
        acc
    }

    /// Weights over joint assignments of `members` in `state`, in any scale.
    fn joint(&mut self, state: &State, members: &[Vertex], pivot: Spin) -> Result<Vec<(Vec<Spin>, S)>, ComputeError> {
        let Some((&first, rest)) = members.split_first() else {
            return Ok(vec![(Vec::new(), S::one())]);
        };
        if self.mode == Mode::Pairwise && rest.is_empty() {
            let w = self.weights(state, first, pivot)?;
            return Ok(w.into_iter().enumerate().filter(|(_, w)| !w.is_zero()).map(|(s, w)| (vec![s], w)).collect());
        }
        let marginal = self.marginal(state, first)?;
        let mut out = Vec::new();
        for (x, p) in marginal.probs.into_iter().enumerate() {
            if p.is_zero() {
                continue;
            }
            let sub = self.pin(state, first, |_| x, None, true).ok_or_else(|| self.zero_denominator(pivot))?;
            for (mut xs, w) in self.joint(&sub, rest, pivot)? {
                xs.insert(0, x);
                out.push((xs, w.times(&p)));
            }
        }
        Ok(out)
    }

    /// Marginal of `v` in `state`, trying pivot spins in order. An
    /// infeasible state is reported as a zero denominator.
    fn marginal(&mut self, state: &State, v: Vertex) -> Result<MarginalDistribution<S>, ComputeError> {
        let mut last = None;
        for pivot in 0..self.q() {
            match self.weights(state, v, pivot) {
                Ok(w) => return normalize_weights(&w).map_err(|_| self.zero_denominator(pivot)),
                Err(e @ ComputeError::ZeroDenominator { .. }) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("q >= 1"))
    }
}

/// Weight of each joint spin assignment of a term's other copies.
type JointWeights<S> = Vec<(Vec<Spin>, S)>;

struct Term {
    factor: usize,
    pins: Vec<Option<Spin>>,
    /// Alive members other than the split vertex, with their positions.
    others: Vec<(usize, Vertex)>,
    v_pos: usize,
    dependent: bool,
}

impl Term {
    fn others_vertices(&self) -> Vec<Vertex> {
        self.others.iter().map(|&(_, u)| u).collect()
    }
}

fn to_ratios<S: Scalar>(w: &[S], reference: Spin) -> Option<Vec<S>> {
    let r = &w[reference];
    (!r.is_zero()).then(|| w.iter().map(|x| x.over(r)).collect())
}

fn check_query(model: &Model, v: Vertex) -> Result<(), ComputeError> {
    if v >= model.n() {
        return Err(ComputeError::VertexOutOfRange(v));
    }
    if model.boundary.is_frozen(v) {
        return Err(ComputeError::FrozenQueryVertex(v));
    }
    Ok(())
}

fn run<S: Scalar, T>(
    model: &Model,
    mode: Mode,
    options: RecursionOptions,
    f: impl FnOnce(&mut Engine<S>, &State) -> Result<T, ComputeError>,
) -> Result<(T, RecursionStats), ComputeError> {
    let w = model.weights::<S>();
    let mut engine = Engine::new(model, &w, mode, options)?;
    let state = engine.initial_state(model).ok_or(ComputeError::ZeroPartitionFunction)?;
    let out = f(&mut engine, &state)?;
    Ok((out, engine.stats))
}

/// Ratio vector at `v` of a pairwise model by vertex splitting.
pub fn ratio_by_recursion<S: Scalar>(model: &Model, v: Vertex, reference: Spin) -> Result<RatioVector<S>, ComputeError> {
    ratio_by_recursion_with(model, v, reference, RecursionOptions::default()).map(|(r, _)| r)
}

pub fn ratio_by_recursion_with<S: Scalar>(
    model: &Model,
    v: Vertex,
    reference: Spin,
    options: RecursionOptions,
) -> Result<(RatioVector<S>, RecursionStats), ComputeError> {
    model.structure.as_graph().ok_or(ComputeError::NeedsGraph)?;
    check_query(model, v)?;
    if reference >= model.q() {
        return Err(ComputeError::SpinOutOfRange(reference));
    }
    run(model, Mode::Pairwise, options, |e: &mut Engine<S>, st| {
        let w = e.weights(st, v, reference)?;
        to_ratios(&w, reference).ok_or_else(|| e.zero_denominator(reference))
    })
    .map(|(ratios, stats)| (RatioVector { reference, ratios }, stats))
}

/// Marginal at `v` by vertex splitting, trying reference spins in order
/// unless one is given.
pub fn split_marginal<S: Scalar>(
    model: &Model,
    v: Vertex,
    reference: Option<Spin>,
) -> Result<(MarginalDistribution<S>, RecursionStats, Spin), ComputeError> {
    let candidates: Vec<Spin> = match reference {
        Some(r) => vec![r],
        None => (0..model.q()).collect(),
    };
    let mut last = ComputeError::NoFeasibleReference;
    for r in candidates {
        match ratio_by_recursion_with::<S>(model, v, r, RecursionOptions::default()) {
            Ok((ratios, stats)) => return Ok((normalize_weights(&ratios.ratios)?, stats, r)),
            Err(e @ ComputeError::ZeroDenominator { .. }) if reference.is_some() => return Err(e),
            Err(ComputeError::ZeroDenominator { .. }) => last = ComputeError::NoFeasibleReference,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

/// `P(v = s1) / P(v = s0)` on a graph or hypergraph model.
pub fn hyper_ratio<S: Scalar>(model: &Model, v: Vertex, s1: Spin, s0: Spin) -> Result<S, ComputeError> {
    check_query(model, v)?;
    for s in [s1, s0] {
        if s >= model.q() {
            return Err(ComputeError::SpinOutOfRange(s));
        }
    }
    if s1 == s0 {
        return Ok(S::one());
    }
    let (m, _) = run(model, Mode::Joint, RecursionOptions::default(), |e: &mut Engine<S>, st| match e.marginal(st, v) {
        Err(ComputeError::ZeroDenominator { .. }) => Err(ComputeError::NoFeasibleReference),
        other => other,
    })?;
    if m.probs[s0].is_zero() {
        return Err(ComputeError::ReferenceSpinHasZeroProbability(s0));
    }
    Ok(m.probs[s1].over(&m.probs[s0]))
}

/// Marginal at `v` on a graph or hypergraph model via the joint recursion.
pub fn hyper_marginal<S: Scalar>(model: &Model, v: Vertex) -> Result<MarginalDistribution<S>, ComputeError> {
    hyper_marginal_with(model, v, RecursionOptions::default()).map(|(m, _)| m)
}

pub fn hyper_marginal_with<S: Scalar>(
    model: &Model,
    v: Vertex,
    options: RecursionOptions,
) -> Result<(MarginalDistribution<S>, RecursionStats), ComputeError> {
    check_query(model, v)?;
    run(model, Mode::Joint, options, |e, st| match e.marginal(st, v) {
        Err(ComputeError::ZeroDenominator { .. }) => Err(ComputeError::NoFeasibleReference),
        other => other,
    })
}
