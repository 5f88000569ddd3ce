//! Ratio recursion on CD trees.
//!
//! A node's ratio for spin `s` is
//! `φ(s)/φ(ref) · Π_children Σ_l Φ(s,l) R_c(l) / Σ_l Φ(ref,l) R_c(l)`,
//! where every coupled leaf hanging off this node is frozen to `s` while the
//! children are evaluated (both sums of a factor see the same children).
//!
//! Every factor is scale-free in `R_c`, so subtrees return weight vectors in
//! an arbitrary scale instead of ratios. This matters for hard constraints: a
//! node next to a leaf frozen to the reference has zero weight on the
//! reference, and its ratio vector would be infinite. Only children that carry
//! coupled leaves of the node need the division by the reference column.

use std::collections::HashMap;

use crate::dist::{normalize_weights, MarginalDistribution, RatioVector};
use crate::error::ComputeError;
use crate::model::{Model, Spin, Vertex, Weights};
use crate::num::{is_negative, Rational, Scalar};
use crate::tree::{build_cd_tree, CdTree, NodeId, NodeKind};

/// How leaves cut off by a depth limit (or padding leaves) are initialized.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum BoundaryInitialization {
    /// The leaf carries no information: its factor in the parent's product
    /// is one. On alignable systems this agrees with `Distribution(a)` for
    /// the alignment vector `a`.
    #[default]
    AllOnes,
    /// Leaf spin distributed proportionally to `φ(s)·a(s)`.
    Distribution(Vec<Rational>),
    /// Leaf frozen to one spin.
    FixedSpin(Spin),
}

impl BoundaryInitialization {
    pub fn validate(&self, q: usize) -> Result<(), ComputeError> {
        match self {
            BoundaryInitialization::AllOnes => Ok(()),
            BoundaryInitialization::FixedSpin(s) if *s < q => Ok(()),
            BoundaryInitialization::FixedSpin(s) => Err(ComputeError::SpinOutOfRange(*s)),
            BoundaryInitialization::Distribution(a) => {
                if a.len() != q {
                    return Err(ComputeError::InvalidArgument(format!(
                        "boundary distribution has {} entries, expected {q}",
                        a.len()
                    )));
                }
                if a.iter().any(is_negative) {
                    return Err(ComputeError::InvalidArgument("boundary distribution has a negative entry".into()));
                }
                let total: Rational = a.iter().sum();
                if total != crate::num::int(1) {
                    return Err(ComputeError::InvalidArgument("boundary distribution does not sum to 1".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Strategy {
    /// Cache subtree results keyed by the spins of the coupling-line tops
    /// that can reach into the subtree.
    #[default]
    Memoized,
    /// Re-evaluate every subtree for every non-reference spin of its parent.
    Naive,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalStats {
    /// Internal-node evaluations performed.
    pub node_visits: u64,
    pub tree_nodes: usize,
}

/// Root ratio vector of `tree` (built for `model`) relative to the tree's
/// reference spin.
pub fn eval_ratios<S: Scalar>(
    model: &Model,
    tree: &CdTree,
    init: &BoundaryInitialization,
) -> Result<RatioVector<S>, ComputeError> {
    eval_ratios_with(model, tree, init, Strategy::Memoized).map(|(r, _)| r)
}

pub fn eval_ratios_with<S: Scalar>(
    model: &Model,
    tree: &CdTree,
    init: &BoundaryInitialization,
    strategy: Strategy,
) -> Result<(RatioVector<S>, EvalStats), ComputeError> {
    let q = model.q();
    init.validate(q)?;
    let weights = model.weights::<S>();
    let sys = &model.system;
    let pad_pair = sys.pair.as_ref().map(|m| m.entries().iter().map(S::from_rational).collect());
    let pad_phi = sys.potentials.default.as_ref().map(|p| p.iter().map(S::from_rational).collect());
    let mut ev = Evaluator {
        tree,
        weights: &weights,
        pad_pair,
        pad_phi,
        init,
        reference: tree.reference(),
        strategy,
        relevant: relevant_tops(tree),
        frozen_copies: frozen_copy_tops(tree),
        assign: vec![usize::MAX; tree.len()],
        memo: HashMap::new(),
        visits: 0,
    };
    let root = CdTree::ROOT;
    let w = if tree.node(root).kind == NodeKind::Internal {
        ev.node_weights(root)?
    } else {
        // Depth-zero tree: the root itself is a boundary leaf.
        match ev.leaf_vector(root)? {
            Some(w) => w,
            None => ev.potential(root)?.to_vec(),
        }
    };
    let r = &w[ev.reference];
    if r.is_zero() {
        return Err(ev.zero_denominator(root));
    }
    let ratios = w.iter().map(|x| x.over(r)).collect();
    let stats = EvalStats { node_visits: ev.visits, tree_nodes: tree.len() };
    Ok((RatioVector { reference: tree.reference(), ratios }, stats))
}

/// For every node, the ancestors `t` with a `(top, bottom)` pair such that
/// `top = t` and the bottom lies in the node's subtree.
fn ancestors_reached(tree: &CdTree, pairs: impl Iterator<Item = (NodeId, NodeId)>) -> Vec<Vec<NodeId>> {
    let mut out = vec![Vec::new(); tree.len()];
    for (top, bottom) in pairs {
        let mut cur = bottom;
        while cur != top {
            out[cur].push(top);
            cur = tree.node(cur).parent.expect("top is an ancestor of its bottom");
        }
    }
    for tops in &mut out {
        tops.sort_unstable();
        tops.dedup();
    }
    out
}

/// Coupling-line tops strictly above each node whose bottoms lie in its
/// subtree: the only ancestor spins its evaluation depends on.
fn relevant_tops(tree: &CdTree) -> Vec<Vec<NodeId>> {
    ancestors_reached(tree, tree.coupling_lines().iter().map(|l| (l.top, l.bottom)))
}

/// Ancestors with a cycle-closing frozen copy in each node's subtree.
fn frozen_copy_tops(tree: &CdTree) -> Vec<Vec<NodeId>> {
    let pairs = (0..tree.len()).filter_map(|id| match tree.node(id).kind {
        NodeKind::Frozen { closes_at: Some(top), .. } => Some((top, id)),
        _ => None,
    });
    ancestors_reached(tree, pairs)
}

struct Evaluator<'a, S> {
    tree: &'a CdTree,
    weights: &'a Weights<S>,
    pad_pair: Option<Vec<S>>,
    pad_phi: Option<Vec<S>>,
    init: &'a BoundaryInitialization,
    reference: Spin,
    strategy: Strategy,
    relevant: Vec<Vec<NodeId>>,
    frozen_copies: Vec<Vec<NodeId>>,
    /// Spin currently queried at each node on the active path.
    assign: Vec<Spin>,
    memo: HashMap<(NodeId, Vec<Spin>), Vec<S>>,
    visits: u64,
}

impl<S: Scalar> Evaluator<'_, S> {
    fn q(&self) -> usize {
        self.weights.q
    }

    fn indicator(&self, spin: Spin) -> Vec<S> {
        (0..self.q()).map(|s| if s == spin { S::one() } else { S::zero() }).collect()
    }

    fn potential(&self, id: NodeId) -> Result<&[S], ComputeError> {
        match self.tree.node(id).vertex {
            Some(v) => Ok(&self.weights.potentials[v]),
            None => self.pad_phi.as_deref().ok_or_else(needs_default),
        }
    }

    fn interaction(&self, parent: NodeId, child: NodeId, s_parent: Spin, s_child: Spin) -> Result<&S, ComputeError> {
        let node = self.tree.node(child);
        match (node.edge, self.tree.node(parent).vertex) {
            (Some(e), Some(u)) => Ok(self.weights.pair(e, u, s_parent, s_child)),
            _ => {
                let m = self.pad_pair.as_deref().ok_or_else(needs_default)?;
                Ok(&m[s_parent * self.q() + s_child])
            }
        }
    }

    fn zero_denominator(&self, id: NodeId) -> ComputeError {
        let path: Vec<Vertex> = self.tree.walk(id).into_iter().flatten().collect();
        ComputeError::ZeroDenominator { reference: self.reference, path }
    }

    /// Weight vector of a leaf, or `None` when it contributes a factor of one.
    fn leaf_vector(&self, id: NodeId) -> Result<Option<Vec<S>>, ComputeError> {
        Ok(match &self.tree.node(id).kind {
            NodeKind::Frozen { spin, .. } => Some(self.indicator(*spin)),
            NodeKind::Coupled { top } => Some(self.indicator(self.assign[*top])),
            NodeKind::Boundary => match self.init {
                BoundaryInitialization::AllOnes => None,
                BoundaryInitialization::FixedSpin(s) => Some(self.indicator(*s)),
                BoundaryInitialization::Distribution(a) => {
                    let phi = self.potential(id)?;
                    Some(phi.iter().zip(a).map(|(p, x)| p.times(&S::from_rational(x))).collect())
                }
            },
            NodeKind::Internal => unreachable!("internal nodes are evaluated recursively"),
        })
    }

    fn child_vector(&mut self, id: NodeId) -> Result<Option<Vec<S>>, ComputeError> {
        if self.tree.node(id).kind != NodeKind::Internal {
            return self.leaf_vector(id);
        }
        if self.strategy == Strategy::Naive {
            return self.node_weights(id).map(Some);
        }
        let key = (id, self.relevant[id].iter().map(|&t| self.assign[t]).collect::<Vec<_>>());
        if let Some(hit) = self.memo.get(&key) {
            return Ok(Some(hit.clone()));
        }
        let r = self.node_weights(id)?;
        self.memo.insert(key, r.clone());
        Ok(Some(r))
    }

    /// Weights proportional to the spin distribution at `id` given the
    /// active coupling context.
    ///
    /// Children whose subtrees hold no copy of this node are separate
    /// components and enter as plain sums. The others share components with
    /// each other: a child holding only reference-frozen copies enters as a
    /// plain sum, one holding coupled copies as a ratio against the reference
    /// spin (one at the reference itself), exactly as in the recursion.
    fn node_weights(&mut self, id: NodeId) -> Result<Vec<S>, ComputeError> {
        self.visits += 1;
        let q = self.q();
        let reference = self.reference;
        let mut w = self.potential(id)?.to_vec();
        let children = self.tree.node(id).children.clone();
        let coupled: Vec<bool> = children.iter().map(|&c| self.relevant[c].contains(&id)).collect();
        let linked: Vec<bool> =
            children.iter().enumerate().map(|(k, &c)| coupled[k] || self.frozen_copies[c].contains(&id)).collect();
        let mut cached: Vec<Option<Option<Vec<S>>>> = vec![None; children.len()];
        // Non-reference spins first so the naive strategy can reuse
        // spin-independent children for the reference column.
        let order = (0..q).filter(|&s| s != reference).chain(std::iter::once(reference));
        for s in order {
            if w[s].is_zero() {
                continue;
            }
            self.assign[id] = s;
            // Separate components first: a zero there is exact.
            let pass = children.iter().enumerate().filter(|&(k, _)| !linked[k]);
            let linked_pass = children.iter().enumerate().filter(|&(k, _)| linked[k]);
            for (k, &c) in pass.chain(linked_pass) {
                if !linked[k] && w[s].is_zero() {
                    break;
                }
                if coupled[k] {
                    if s == reference {
                        continue;
                    }
                    let vec = self.child_vector(c)?.expect("coupled subtrees have a weight vector");
                    let num = self.contract(id, c, s, &vec)?;
                    let den = self.contract(id, c, reference, &vec)?;
                    if den.is_zero() {
                        self.assign[id] = usize::MAX;
                        return Err(self.zero_denominator(c));
                    }
                    w[s] = w[s].times(&num.over(&den));
                    continue;
                }
                let reuse = self.strategy == Strategy::Memoized || s == reference;
                let vec = match (&cached[k], reuse) {
                    (Some(v), true) => v.clone(),
                    _ => {
                        let v = self.child_vector(c)?;
                        cached[k] = Some(v.clone());
                        v
                    }
                };
                if let Some(vec) = vec {
                    w[s] = w[s].times(&self.contract(id, c, s, &vec)?);
                }
            }
        }
        self.assign[id] = usize::MAX;
        Ok(w)
    }

    /// `Σ_l Φ(s, l) vec[l]` across the edge into `child`.
    fn contract(&self, id: NodeId, child: NodeId, s: Spin, vec: &[S]) -> Result<S, ComputeError> {
        let mut acc = S::zero();
        for (l, x) in vec.iter().enumerate() {
            if !x.is_zero() {
                acc = acc.plus(&self.interaction(id, child, s, l)?.times(x));
            }
        }
        Ok(acc)
    }
}

fn needs_default() -> ComputeError {
    ComputeError::InvalidArgument("padding nodes need a default interaction and potential".into())
}

/// Marginal at `v` from its CD tree, optionally truncated at `depth`.
///
/// With `reference = None` every spin is tried in order until one gives a
/// well-defined recursion.
pub fn cdtree_marginal<S: Scalar>(
    model: &Model,
    v: Vertex,
    depth: Option<usize>,
    reference: Option<Spin>,
    init: &BoundaryInitialization,
    strategy: Strategy,
) -> Result<(MarginalDistribution<S>, EvalStats, Spin), ComputeError> {
    if v >= model.n() {
        return Err(ComputeError::VertexOutOfRange(v));
    }
    if model.boundary.is_frozen(v) {
        return Err(ComputeError::FrozenQueryVertex(v));
    }
    let candidates: Vec<Spin> = match reference {
        Some(r) => vec![r],
        None => (0..model.q()).collect(),
    };
    let mut last = ComputeError::NoFeasibleReference;
    for r in candidates {
        let tree = build_cd_tree(model, v, r, depth)?;
        match eval_ratios_with::<S>(model, &tree, init, strategy) {
            Ok((ratios, stats)) => return Ok((normalize_weights(&ratios.ratios)?, stats, r)),
            Err(e @ ComputeError::ZeroDenominator { .. }) if reference.is_some() => return Err(e),
            Err(e @ ComputeError::ZeroDenominator { .. }) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(match last {
        ComputeError::ZeroDenominator { .. } => ComputeError::NoFeasibleReference,
        e => e,
    })
}

/// Depth plan for a target accuracy under an assumed exponential decay rate.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncationPlan {
    pub depth: usize,
    pub epsilon: f64,
    pub kappa: f64,
    pub max_degree: usize,
    pub q: usize,
    /// Predicted number of tree nodes, `((q-1) D)^depth`.
    pub est_cost: f64,
}

pub fn plan_depth(epsilon: f64, kappa: f64, q: usize, max_degree: usize) -> Result<TruncationPlan, ComputeError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(ComputeError::InvalidArgument(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(ComputeError::InvalidArgument(format!("decay rate must be positive, got {kappa}")));
    }
    // Absorb rounding in ln so that exact integers are not bumped up.
    let depth = (-epsilon.ln() / kappa - 1e-9).ceil().max(0.0) as usize;
    let branching = (q.saturating_sub(1) * max_degree) as f64;
    Ok(TruncationPlan { depth, epsilon, kappa, max_degree, q, est_cost: branching.powi(depth as i32) })
}

/// Marginal from the CD tree truncated at `plan.depth`, with node statistics.
pub fn truncated_marginal<S: Scalar>(
    model: &Model,
    v: Vertex,
    plan: &TruncationPlan,
    init: &BoundaryInitialization,
) -> Result<(MarginalDistribution<S>, EvalStats), ComputeError> {
    cdtree_marginal(model, v, Some(plan.depth), None, init, Strategy::Memoized).map(|(m, s, _)| (m, s))
}
