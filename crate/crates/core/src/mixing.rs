//! Finite-size mixing experiments: how far a boundary discrepancy at
//! distance `d` moves the marginal at the root (with and without coupling
//! lines), decay-rate fits, positive alignability and the permissive-spin
//! extension.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::dist::{normalize_weights, MarginalDistribution, RatioVector};
use crate::error::ComputeError;
use crate::eval::{eval_ratios, BoundaryInitialization};
use crate::model::{Matrix, Model, Spin, SpinSystem, Tensor, Vertex};
use crate::num::{format_rational, int, Rational, Scalar};
use crate::oracle::OracleConfig;
use crate::partition::{engine_marginal, Engine};
use crate::tree::{build_cd_tree, validate_coupling_lines, CdTree, CouplingLine, NodeId};

/// Non-negative `a` (summing to one) with `Σ_i Φ(l,i) φ(i) a(i) = c1` for
/// every spin `l` (and the same for `Φᵀ`).
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentCertificate {
    pub alpha: Vec<Rational>,
    pub c1: Rational,
}

impl AlignmentCertificate {
    /// Exact check of the defining equations against `sys`.
    pub fn verify(&self, sys: &SpinSystem) -> bool {
        let Ok(m) = alignment_matrix(sys) else { return false };
        self.alpha.len() == sys.q
            && self.c1 > int(0)
            && self.alpha.iter().all(|a| *a >= int(0))
            && self.alpha.iter().sum::<Rational>() == int(1)
            && m.iter().all(|row| row.iter().zip(&self.alpha).map(|(x, a)| x * a).sum::<Rational>() == self.c1)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "alignable": true,
            "alpha": self.alpha.iter().map(format_rational).collect::<Vec<_>>(),
            "c1": format_rational(&self.c1),
        })
    }
}

/// Rows `M(l, i) = Φ(l, i) φ(i)`, followed by the rows of `Φᵀ` when `Φ` is
/// not symmetric: an edge of the graph may be entered from either end, so
/// the alignment has to hold in both orientations.
fn alignment_matrix(sys: &SpinSystem) -> Result<Vec<Vec<Rational>>, ComputeError> {
    if !sys.is_spatially_invariant() {
        return Err(ComputeError::NotSpatiallyInvariant(
            "alignability needs one interaction matrix and one potential vector".into(),
        ));
    }
    let pair = sys.pair.as_ref().expect("spatially invariant");
    let phi = sys.potentials.default.as_ref().expect("spatially invariant");
    let q = sys.q;
    let mut rows: Vec<Vec<Rational>> = (0..q).map(|l| (0..q).map(|i| pair.get(l, i) * &phi[i]).collect()).collect();
    if *pair != pair.transpose() {
        rows.extend((0..q).map(|l| (0..q).map(|i| pair.get(i, l) * &phi[i]).collect::<Vec<_>>()));
    }
    Ok(rows)
}

/// Decide whether `M a = c·1`, `a ≥ 0`, `c > 0` has a solution.
///
/// Normalizing `c = 1`, a feasible system has a basic solution supported on
/// linearly independent columns, so trying every column subset (smallest
/// first) and solving exactly settles the question. `Ok(None)` is a proof of
/// infeasibility.
pub fn check_positively_alignable(sys: &SpinSystem) -> Result<Option<AlignmentCertificate>, ComputeError> {
    let m = alignment_matrix(sys)?;
    let q = sys.q;
    if q > 20 {
        return Err(ComputeError::InvalidArgument(format!("alignability search is limited to q <= 20, got {q}")));
    }
    let mut subsets: Vec<u32> = (1..1u32 << q).collect();
    subsets.sort_by_key(|s| (s.count_ones(), *s));
    for mask in subsets {
        let cols: Vec<usize> = (0..q).filter(|&i| mask >> i & 1 == 1).collect();
        let Some(x) = solve_unique(&m, &cols) else { continue };
        if x.iter().any(|v| *v < int(0)) {
            continue;
        }
        let total: Rational = x.iter().sum();
        let mut alpha = vec![int(0); q];
        for (&c, v) in cols.iter().zip(&x) {
            alpha[c] = v / &total;
        }
        return Ok(Some(AlignmentCertificate { alpha, c1: int(1) / total }));
    }
    Ok(None)
}

/// Unique solution of `M[:, cols] x = 1`, if the columns are independent
/// and the system is consistent.
fn solve_unique(m: &[Vec<Rational>], cols: &[usize]) -> Option<Vec<Rational>> {
    let k = cols.len();
    let mut a: Vec<Vec<Rational>> = m
        .iter()
        .map(|row| cols.iter().map(|&c| row[c].clone()).chain([int(1)]).collect())
        .collect();
    let rows = a.len();
    // Every column must yield a pivot, so column c pivots on row c.
    for c in 0..k {
        let p = (c..rows).find(|&i| !a[i][c].is_zero())?;
        a.swap(c, p);
        let pivot = a[c][c].clone();
        for x in a[c].iter_mut() {
            *x = &*x / &pivot;
        }
        let pivot_row = a[c].clone();
        for (i, row) in a.iter_mut().enumerate() {
            if i != c && !row[c].is_zero() {
                let f = row[c].clone();
                for (x, y) in row.iter_mut().zip(&pivot_row) {
                    *x -= &f * y;
                }
            }
        }
    }
    if a[k..].iter().any(|row| !row[k].is_zero()) {
        return None;
    }
    Some(a[..k].iter().map(|row| row[k].clone()).collect())
}

/// Constants of the extra spin: `Φ(σ0, ·) = Φ(·, σ0) = c2`, `φ(σ0) = c3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Permissive {
    pub c2: Rational,
    pub c3: Rational,
}

impl Default for Permissive {
    fn default() -> Self {
        Permissive { c2: int(1), c3: int(1) }
    }
}

/// Same system with one extra spin (index `q`) that interacts with every
/// spin with weight `c2` and has potential `c3` everywhere. Forbidding the
/// new spin at every vertex recovers the original measure.
pub fn augment_permissive(sys: &SpinSystem, p: &Permissive) -> Result<SpinSystem, ComputeError> {
    if p.c2 <= int(0) || p.c3 <= int(0) {
        return Err(ComputeError::InvalidArgument("permissive constants must be positive".into()));
    }
    let q = sys.q;
    let grow_matrix = |m: &Matrix| {
        Matrix::from_fn(q + 1, |a, b| if a == q || b == q { p.c2.clone() } else { m.get(a, b).clone() })
    };
    let grow_tensor = |t: &Tensor| {
        Tensor::from_fn(q + 1, t.arity(), |s| if s.contains(&q) { p.c2.clone() } else { t.get(s).clone() })
    };
    let grow_phi = |v: &Vec<Rational>| v.iter().cloned().chain([p.c3.clone()]).collect::<Vec<_>>();
    let mut out = sys.clone();
    out.q = q + 1;
    out.pair = sys.pair.as_ref().map(grow_matrix);
    out.edge_overrides = sys.edge_overrides.iter().map(|(k, m)| (*k, grow_matrix(m))).collect();
    out.hyper_overrides = sys.hyper_overrides.iter().map(|(k, t)| (k.clone(), grow_tensor(t))).collect();
    out.potentials.default = sys.potentials.default.as_ref().map(grow_phi);
    out.potentials.per_vertex = sys.potentials.per_vertex.iter().map(|(v, phi)| (*v, grow_phi(phi))).collect();
    if let Some(names) = &sys.spin_names {
        let mut name = String::from("σ0");
        while names.contains(&name) {
            name.push('\'');
        }
        out.spin_names = Some(names.iter().cloned().chain([name]).collect());
    }
    Ok(out)
}

/// Which vertices carry the two boundary conditions being compared.
#[derive(Clone, Debug, PartialEq)]
pub enum LambdaShape {
    /// Every vertex at distance exactly `d`.
    Sphere,
    /// Every vertex at distance `d` or more.
    Beyond,
    /// An explicit set; all of it must be at distance `d` or more.
    Vertices(BTreeSet<Vertex>),
}

/// One distance of a mixing profile.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingPoint {
    pub distance: usize,
    /// Largest `|p(σ) − p'(σ)|` over the tested boundary pairs and spins.
    pub delta: f64,
    pub exhaustive: bool,
    /// Feasible boundary configurations evaluated (per coupling-line set).
    pub configs_tested: usize,
    /// Pairs compared, summed over coupling-line sets.
    pub pairs_tested: usize,
    /// Configurations skipped because the conditional measure is undefined.
    pub infeasible: usize,
    /// Coupling-line sets tried, including the empty one.
    pub lines_tested: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixingProfile {
    pub distances: Vec<usize>,
    pub deltas: Vec<f64>,
    pub fitted_kappa: Option<f64>,
    pub sample_budget: usize,
    /// True when every point enumerated its boundary configurations.
    pub exhaustive: bool,
    pub points: Vec<MixingPoint>,
}

impl MixingProfile {
    pub fn from_points(points: Vec<MixingPoint>, sample_budget: usize) -> Self {
        let mut profile = MixingProfile {
            distances: points.iter().map(|p| p.distance).collect(),
            deltas: points.iter().map(|p| p.delta).collect(),
            fitted_kappa: None,
            sample_budget,
            exhaustive: points.iter().all(|p| p.exhaustive),
            points,
        };
        profile.fitted_kappa = fit_decay_rate(&profile).ok().map(|f| f.kappa);
        profile
    }

    /// Plot-ready rows `d,delta,exhaustive,pairs_tested,lines_tested`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("d,delta,exhaustive,pairs_tested,lines_tested\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.distance, p.delta, p.exhaustive, p.pairs_tested, p.lines_tested
            ));
        }
        out
    }
}

/// Distances from `v` in the primal graph of the model's structure.
fn distances_from(model: &Model, v: Vertex) -> Vec<Option<usize>> {
    let n = model.n();
    let mut adj = vec![BTreeSet::new(); n];
    for scope in model.structure.factor_scopes() {
        for &a in &scope {
            for &b in &scope {
                if a != b {
                    adj[a].insert(b);
                }
            }
        }
    }
    let mut dist = vec![None; n];
    dist[v] = Some(0);
    let mut queue = VecDeque::from([v]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].expect("queued vertices have a distance");
        for &w in &adj[u] {
            if dist[w].is_none() {
                dist[w] = Some(du + 1);
                queue.push_back(w);
            }
        }
    }
    dist
}

fn delta_set(model: &Model, v: Vertex, shape: &LambdaShape, d: usize) -> Result<Vec<Vertex>, ComputeError> {
    if v >= model.n() {
        return Err(ComputeError::VertexOutOfRange(v));
    }
    let dist = distances_from(model, v);
    let set: Vec<Vertex> = match shape {
        LambdaShape::Sphere => (0..model.n()).filter(|&u| dist[u] == Some(d)).collect(),
        LambdaShape::Beyond => (0..model.n()).filter(|&u| dist[u].is_some_and(|x| x >= d)).collect(),
        LambdaShape::Vertices(set) => {
            if let Some(&u) = set.iter().find(|&&u| u >= model.n()) {
                return Err(ComputeError::VertexOutOfRange(u));
            }
            if let Some(&u) = set.iter().find(|&&u| dist[u].is_some_and(|x| x < d)) {
                return Err(ComputeError::InvalidArgument(format!("vertex {u} is closer than distance {d}")));
            }
            set.iter().copied().collect()
        }
    };
    Ok(set)
}

/// Boundary configurations on `delta`: all of them (lexicographic) when at
/// most `budget`, otherwise `budget` uniform draws from a stream seeded by
/// `seed`. Draws are a prefix-stable stream, so a larger budget only adds
/// configurations.
fn boundary_configs(delta: usize, q: usize, budget: usize, seed: u64) -> (Vec<Vec<Spin>>, bool) {
    let total = u32::try_from(delta).ok().and_then(|k| q.checked_pow(k));
    match total {
        Some(t) if t <= budget => {
            let configs = (0..t)
                .map(|mut idx| {
                    let mut c = vec![0; delta];
                    for slot in c.iter_mut().rev() {
                        *slot = idx % q;
                        idx /= q;
                    }
                    c
                })
                .collect();
            (configs, true)
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let configs = (0..budget).map(|_| (0..delta).map(|_| rng.gen_range(0..q)).collect()).collect();
            (configs, false)
        }
    }
}

/// Running `max_σ (max p(σ) − min p(σ))` over a set of marginals.
struct Spread {
    lo: Vec<Rational>,
    hi: Vec<Rational>,
    count: usize,
}

impl Spread {
    fn new() -> Self {
        Spread { lo: Vec::new(), hi: Vec::new(), count: 0 }
    }

    fn add(&mut self, p: &MarginalDistribution<Rational>) {
        if self.count == 0 {
            self.lo = p.probs.clone();
            self.hi = p.probs.clone();
        } else {
            for (i, x) in p.probs.iter().enumerate() {
                if *x < self.lo[i] {
                    self.lo[i] = x.clone();
                }
                if *x > self.hi[i] {
                    self.hi[i] = x.clone();
                }
            }
        }
        self.count += 1;
    }

    fn delta(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| (b - a).to_f64()).fold(0.0, f64::max)
    }

    fn pairs(&self) -> usize {
        self.count * self.count.saturating_sub(1) / 2
    }
}

/// Largest change of the marginal at `v` between two boundary conditions
/// that agree except on the vertex set given by `shape` at distance `d`.
/// The model's own boundary is kept fixed; configurations with an empty
/// conditional measure are skipped and counted.
pub fn measure_ssm(
    model: &Model,
    v: Vertex,
    shape: &LambdaShape,
    d: usize,
    budget: usize,
    seed: u64,
    engine: Engine,
) -> Result<MixingPoint, ComputeError> {
    let delta = delta_set(model, v, shape, d)?;
    if delta.contains(&v) {
        return Err(ComputeError::InvalidArgument("the boundary set contains the query vertex".into()));
    }
    let (configs, exhaustive) = boundary_configs(delta.len(), model.q(), budget, seed);
    let cfg = OracleConfig::default();
    let mut spread = Spread::new();
    let mut infeasible = 0;
    for c in &configs {
        let mut b = model.boundary.clone();
        for (&u, &s) in delta.iter().zip(c) {
            b = b.with(u, s);
        }
        let m = model.with_boundary(b).map_err(|e| ComputeError::InvalidArgument(e.to_string()))?;
        match engine_marginal::<Rational>(&m, v, engine, &cfg) {
            Ok(p) => spread.add(&p),
            Err(ComputeError::ZeroPartitionFunction) => infeasible += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(MixingPoint {
        distance: d,
        delta: spread.delta(),
        exhaustive,
        configs_tested: spread.count,
        pairs_tested: spread.pairs(),
        infeasible,
        lines_tested: 1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VssmOptions {
    /// Random non-empty coupling-line sets to try besides the empty set.
    pub line_budget: usize,
    /// Most lines in one set.
    pub max_lines: usize,
    /// Pair each coupled leaf with a leaf frozen to the reference spin that
    /// hangs off a different child of the line's top, as in CD trees built
    /// from cycles.
    pub twin: bool,
}

impl Default for VssmOptions {
    fn default() -> Self {
        VssmOptions { line_budget: 20, max_lines: 3, twin: false }
    }
}

/// One coupling-line set together with its twin leaves.
#[derive(Clone, Debug, Default, PartialEq)]
struct LineSet {
    lines: Vec<CouplingLine>,
    twins: Vec<NodeId>,
}

/// Like [`measure_ssm`] with the sphere at distance `d` on a tree-shaped
/// model, but the maximum is also taken over random valid coupling-line
/// sets whose lower ends lie on the sphere. The empty set is always
/// included and sees the same boundary configurations as `measure_ssm`, so
/// the result is never below it.
pub fn measure_vssm(
    model: &Model,
    root: Vertex,
    d: usize,
    budget: usize,
    seed: u64,
    opts: &VssmOptions,
) -> Result<MixingPoint, ComputeError> {
    let g = model.structure.as_graph().ok_or(ComputeError::NeedsGraph)?;
    if g.edges().len() + 1 != g.n() || !g.is_connected() {
        return Err(ComputeError::InvalidArgument("coupling-line profiles need a tree".into()));
    }
    if d == 0 {
        return Err(ComputeError::InvalidArgument("distance must be at least 1".into()));
    }
    let delta = delta_set(model, root, &LambdaShape::Sphere, d)?;
    let q = model.q();
    // Freeze the sphere so that its vertices become leaves, then evaluate
    // one tree per reference spin (on a tree the shape does not depend on
    // the reference).
    let mut frozen = model.boundary.clone();
    for &u in &delta {
        frozen = frozen.with(u, 0);
    }
    let base = model.with_boundary(frozen).map_err(|e| ComputeError::InvalidArgument(e.to_string()))?;
    let trees: Vec<CdTree> = (0..q).map(|r| build_cd_tree(&base, root, r, None)).collect::<Result<_, _>>()?;
    let node_of: BTreeMap<Vertex, NodeId> =
        trees[0].nodes().iter().enumerate().filter_map(|(id, n)| n.vertex.map(|v| (v, id))).collect();
    let leaves: Vec<NodeId> = delta.iter().map(|u| node_of[u]).collect();

    let mut sets = vec![LineSet::default()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut attempts = 0;
    while sets.len() <= opts.line_budget && attempts < 50 * opts.line_budget.max(1) {
        attempts += 1;
        if let Some(set) = random_line_set(&trees[0], &leaves, opts, &mut rng) {
            sets.push(set);
        }
    }

    let (configs, exhaustive) = boundary_configs(delta.len(), q, budget, seed);
    let (mut best, mut pairs, mut infeasible, mut configs_tested) = (0.0f64, 0, 0, 0);
    for set in &sets {
        let mut prepared = trees.clone();
        for t in prepared.iter_mut() {
            t.add_coupling_lines(&set.lines).map_err(|e| ComputeError::InvalidArgument(format!("{e:?}")))?;
        }
        let bottoms: BTreeSet<NodeId> = set.lines.iter().map(|l| l.bottom).collect();
        let mut spread = Spread::new();
        for c in &configs {
            let mut got = None;
            for (r, t) in prepared.iter_mut().enumerate() {
                for (&leaf, &s) in leaves.iter().zip(c) {
                    if !bottoms.contains(&leaf) {
                        t.set_frozen_spin(leaf, if set.twins.contains(&leaf) { r } else { s });
                    }
                }
                match eval_ratios::<Rational>(&base, t, &BoundaryInitialization::AllOnes) {
                    Ok(RatioVector { ratios, .. }) => {
                        got = Some(normalize_weights(&ratios)?);
                        break;
                    }
                    Err(ComputeError::ZeroDenominator { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            match got {
                Some(p) => spread.add(&p),
                None => infeasible += 1,
            }
        }
        best = best.max(spread.delta());
        pairs += spread.pairs();
        configs_tested = configs_tested.max(spread.count);
    }
    Ok(MixingPoint {
        distance: d,
        delta: best,
        exhaustive,
        configs_tested,
        pairs_tested: pairs,
        infeasible,
        lines_tested: sets.len(),
    })
}

/// Rejection-sample a valid non-empty line set with bottoms among `leaves`.
fn random_line_set(tree: &CdTree, leaves: &[NodeId], opts: &VssmOptions, rng: &mut ChaCha8Rng) -> Option<LineSet> {
    let parents = tree.parents();
    let k = rng.gen_range(1..=opts.max_lines.max(1));
    let mut set = LineSet::default();
    let mut used = BTreeSet::new();
    for _ in 0..k {
        let bottom = *leaves.choose(rng)?;
        if !used.insert(bottom) {
            return None;
        }
        let mut ancestors = Vec::new();
        let mut cur = parents[bottom];
        while let Some(a) = cur {
            ancestors.push(a);
            cur = parents[a];
        }
        let top = *ancestors.choose(rng)?;
        if opts.twin {
            // Leaves under `top` but outside the branch holding `bottom`.
            let branch = *std::iter::once(&bottom).chain(&ancestors).take_while(|&&a| a != top).last()?;
            let candidates: Vec<NodeId> = leaves
                .iter()
                .copied()
                .filter(|&l| tree.is_ancestor(top, l) && l != branch && !tree.is_ancestor(branch, l) && !used.contains(&l))
                .collect();
            let twin = *candidates.choose(rng)?;
            used.insert(twin);
            set.twins.push(twin);
        }
        set.lines.push(CouplingLine { top, bottom });
    }
    validate_coupling_lines(&parents, &set.lines).ok()?;
    Some(set)
}

/// Least-squares fit of `−ln δ(d) = κ d + b` over the positive deltas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayFit {
    pub kappa: f64,
    pub intercept: f64,
    /// `None` when every delta is zero (`kappa` is then infinite).
    pub r_squared: Option<f64>,
    pub points_used: usize,
}

pub fn fit_decay_rate(profile: &MixingProfile) -> Result<DecayFit, ComputeError> {
    if profile.deltas.iter().all(|&x| x == 0.0) {
        return Ok(DecayFit { kappa: f64::INFINITY, intercept: 0.0, r_squared: None, points_used: 0 });
    }
    let pts: Vec<(f64, f64)> = profile
        .distances
        .iter()
        .zip(&profile.deltas)
        .filter(|(_, &y)| y > 0.0)
        .map(|(&d, &y)| (d as f64, -y.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(ComputeError::InvalidArgument(format!("decay fit needs 3 positive deltas, got {}", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(ComputeError::InvalidArgument("decay fit needs at least two distinct distances".into()));
    }
    let kappa = sxy / sxx;
    let intercept = my - kappa * mx;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - kappa * p.0).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(DecayFit { kappa, intercept, r_squared: Some(r_squared), points_used: pts.len() })
}

/// Scale on which contraction is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Transform {
    #[default]
    Identity,
    Log,
}

impl Transform {
    fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Log => x.ln(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractionEstimate {
    /// Largest observed `max_σ |f(p) − f(p')| / max_{i,l} |f(p_i) − f(p'_i)|`.
    pub k_hat: f64,
    pub samples: usize,
}

fn random_simplex_point(rng: &mut ChaCha8Rng, q: usize) -> Vec<f64> {
    let x: Vec<f64> = (0..q).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = x.iter().sum();
    x.into_iter().map(|v| v / total).collect()
}

/// Empirical Lipschitz constant of `map` (children marginals to a
/// marginal) under small multiplicative perturbations of the children.
pub fn estimate_lipschitz(
    q: usize,
    arity: usize,
    transform: Transform,
    samples: usize,
    seed: u64,
    map: impl Fn(&[Vec<f64>]) -> Option<Vec<f64>>,
) -> ContractionEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k_hat = 0.0f64;
    let mut used = 0;
    for _ in 0..samples {
        let kids: Vec<Vec<f64>> = (0..arity).map(|_| random_simplex_point(&mut rng, q)).collect();
        let moved: Vec<Vec<f64>> = kids
            .iter()
            .map(|p| {
                let x: Vec<f64> = p.iter().map(|v| v * (0.2 * (2.0 * rng.gen::<f64>() - 1.0)).exp()).collect();
                let total: f64 = x.iter().sum();
                x.into_iter().map(|v| v / total).collect()
            })
            .collect();
        let input = kids
            .iter()
            .zip(&moved)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (transform.apply(*x) - transform.apply(*y)).abs()))
            .fold(0.0, f64::max);
        let (Some(out), Some(out_moved)) = (map(&kids), map(&moved)) else { continue };
        if input < 1e-12 {
            continue;
        }
        let output = out
            .iter()
            .zip(&out_moved)
            .filter(|(a, b)| !(**a == 0.0 && **b == 0.0))
            .map(|(a, b)| (transform.apply(*a) - transform.apply(*b)).abs())
            .fold(0.0, f64::max);
        k_hat = k_hat.max(output / input);
        used += 1;
    }
    ContractionEstimate { k_hat, samples: used }
}

/// One step of the tree recursion on a spatially invariant system with
/// `degree` children: `p(σ) ∝ φ(σ) Π_i Σ_l Φ(σ,l) p_i(l)`.
pub fn contraction_check(
    sys: &SpinSystem,
    degree: usize,
    transform: Transform,
    samples: usize,
    seed: u64,
) -> Result<ContractionEstimate, ComputeError> {
    // Only the invariance check is needed here.
    alignment_matrix(sys)?;
    let pair: Vec<Vec<f64>> = (0..sys.q)
        .map(|l| (0..sys.q).map(|i| sys.pair.as_ref().expect("invariant").get(l, i).to_f64()).collect())
        .collect();
    let phi: Vec<f64> = sys.potentials.default.as_ref().expect("invariant").iter().map(|x| x.to_f64()).collect();
    let step = |kids: &[Vec<f64>]| {
        let w: Vec<f64> = (0..phi.len())
            .map(|s| {
                kids.iter()
                    .map(|p| pair[s].iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
                    .product::<f64>()
                    * phi[s]
            })
            .collect();
        let total: f64 = w.iter().sum();
        (total > 0.0).then(|| w.into_iter().map(|x| x / total).collect())
    };
    Ok(estimate_lipschitz(sys.q, degree, transform, samples, seed, step))
}

/// Ratios at the root of `tree` after padding every non-fixed node up to
/// `degree` tree neighbours, with padding and truncation leaves drawn from
/// `φ·a`. On an alignable system this equals the unpadded all-ones
/// evaluation.
pub fn extension_ratios(
    model: &Model,
    tree: &CdTree,
    degree: usize,
    cert: &AlignmentCertificate,
) -> Result<RatioVector<Rational>, ComputeError> {
    let padded = tree.pad_to_degree(degree);
    eval_ratios(model, &padded, &BoundaryInitialization::Distribution(cert.alpha.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundaryCondition, Graph};
    use crate::num::ratio;
    use crate::oracle::gibbs_marginal;

    fn tree_model(sys: SpinSystem, edges: &[(Vertex, Vertex)]) -> Model {
        let n = edges.len() + 1;
        Model::graph(sys, Graph::new(n, edges).unwrap(), BoundaryCondition::new()).unwrap()
    }

    /// Complete binary tree below a root of degree 3, `depth` levels.
    fn ternary_root_tree(depth: usize) -> Vec<(Vertex, Vertex)> {
        let mut edges = Vec::new();
        let mut frontier = vec![0];
        let mut next = 1;
        for level in 0..depth {
            let mut grown = Vec::new();
            for &v in &frontier {
                for _ in 0..if level == 0 { 3 } else { 2 } {
                    edges.push((v, next));
                    grown.push(next);
                    next += 1;
                }
            }
            frontier = grown;
        }
        edges
    }

    #[test]
    fn coloring_is_alignable_with_uniform_vector() {
        for q in 2..6 {
            let sys = SpinSystem::coloring(q);
            let cert = check_positively_alignable(&sys).unwrap().unwrap();
            assert_eq!(cert.alpha, vec![ratio(1, q as i64); q]);
            assert_eq!(cert.c1, ratio(q as i64 - 1, q as i64));
            assert!(cert.verify(&sys));
        }
    }

    #[test]
    fn permissive_spin_gives_point_mass() {
        // Hard-core: spin 0 (empty) is compatible with everything.
        let pair = Matrix::new(2, vec![int(1), int(1), int(1), int(0)]).unwrap();
        let sys = SpinSystem::pairwise(pair, vec![int(1), ratio(3, 2)]);
        let cert = check_positively_alignable(&sys).unwrap().unwrap();
        assert_eq!(cert.alpha, vec![int(1), int(0)]);
        assert_eq!(cert.c1, int(1));
    }

    #[test]
    fn identity_and_zero_row() {
        let id = SpinSystem::pairwise(Matrix::from_fn(2, |a, b| int(i64::from(a == b))), vec![int(1); 2]);
        let cert = check_positively_alignable(&id).unwrap().unwrap();
        assert_eq!(cert.alpha, vec![ratio(1, 2); 2]);
        let zero_row = SpinSystem::pairwise(Matrix::new(2, vec![int(1), int(1), int(0), int(0)]).unwrap(), vec![int(1); 2]);
        assert_eq!(check_positively_alignable(&zero_row).unwrap(), None);
        // Rows (1, 2) and (2, 1) with φ = (1, 0): M a = (a0, 2 a0) is never constant.
        let skew = SpinSystem::pairwise(Matrix::new(2, vec![int(1), int(2), int(2), int(1)]).unwrap(), vec![int(1), int(0)]);
        assert_eq!(check_positively_alignable(&skew).unwrap(), None);
        // Rows of Φ have constant sums but columns do not: aligned one way only.
        let one_way = SpinSystem::pairwise(Matrix::new(2, vec![int(1), int(2), int(3), int(0)]).unwrap(), vec![int(1); 2]);
        assert_eq!(check_positively_alignable(&one_way).unwrap(), None);
    }

    #[test]
    fn alignability_needs_invariant_system() {
        let mut sys = SpinSystem::coloring(3);
        sys.edge_overrides.insert((0, 1), Matrix::coloring(3));
        assert!(matches!(check_positively_alignable(&sys), Err(ComputeError::NotSpatiallyInvariant(_))));
    }

    #[test]
    fn permissive_augmentation() {
        let ising = SpinSystem::pairwise(Matrix::new(2, vec![int(2), int(1), int(1), int(2)]).unwrap(), vec![int(1), int(3)]);
        let aug = augment_permissive(&ising, &Permissive::default()).unwrap();
        assert_eq!(aug.q, 3);
        let pair = aug.pair.as_ref().unwrap();
        for s in 0..3 {
            assert_eq!(*pair.get(2, s), int(1));
            assert_eq!(*pair.get(s, 2), int(1));
        }
        assert_eq!(pair.get(0, 0), ising.pair.as_ref().unwrap().get(0, 0));
        assert!(check_positively_alignable(&aug).unwrap().unwrap().verify(&aug));

        let edges = [(0, 1), (1, 2), (2, 0), (2, 3)];
        let g = Graph::new(4, &edges).unwrap();
        let original = Model::graph(ising, g.clone(), BoundaryCondition::from_pairs([(3, 1)])).unwrap();
        let forbidden = Model::graph(aug.forbid_spin(2, 0..4), g, BoundaryCondition::from_pairs([(3, 1)])).unwrap();
        let cfg = OracleConfig::default();
        for v in 0..3 {
            let want = gibbs_marginal::<Rational>(&original, v, &cfg).unwrap();
            let got = gibbs_marginal::<Rational>(&forbidden, v, &cfg).unwrap();
            assert_eq!(got.probs[..2], want.probs[..]);
            assert!(got.probs[2].is_zero());
        }
        assert!(augment_permissive(&SpinSystem::coloring(2), &Permissive { c2: int(0), c3: int(1) }).is_err());
    }

    #[test]
    fn empty_boundary_set_has_no_discrepancy() {
        let m = tree_model(SpinSystem::coloring(3), &[(0, 1), (1, 2)]);
        let p = measure_ssm(&m, 0, &LambdaShape::Vertices(BTreeSet::new()), 1, 10, 1, Engine::CdTree).unwrap();
        assert_eq!(p.delta, 0.0);
        assert!(p.exhaustive);
    }

    #[test]
    fn independent_spins_do_not_mix() {
        let sys = SpinSystem::pairwise(Matrix::from_fn(2, |_, _| int(1)), vec![int(1), int(2)]);
        let m = tree_model(sys, &ternary_root_tree(3));
        for d in 1..=3 {
            let p = measure_ssm(&m, 0, &LambdaShape::Sphere, d, 64, 7, Engine::CdTree).unwrap();
            assert_eq!(p.delta, 0.0, "d = {d}");
        }
    }

    #[test]
    fn exhaustive_profile_agrees_across_engines() {
        let m = tree_model(SpinSystem::coloring(3), &ternary_root_tree(2));
        for d in 1..=2 {
            let a = measure_ssm(&m, 0, &LambdaShape::Sphere, d, 1000, 0, Engine::CdTree).unwrap();
            let b = measure_ssm(&m, 0, &LambdaShape::Sphere, d, 1000, 0, Engine::Exact).unwrap();
            assert!(a.exhaustive);
            assert_eq!(a, b);
        }
        // Depth one: the root is uniform on the colors its three frozen
        // neighbours leave free. Neighbours (1, 1, 2) force color 0 and
        // (0, 0, 0) exclude it; the 3! rainbow boundaries are infeasible.
        let p = measure_ssm(&m, 0, &LambdaShape::Sphere, 1, 1000, 0, Engine::CdTree).unwrap();
        assert_eq!(p.delta, 1.0);
        assert_eq!(p.infeasible, 6);
        assert_eq!(p.configs_tested, 21);
    }

    #[test]
    fn delta_grows_with_budget() {
        let m = tree_model(SpinSystem::coloring(4), &ternary_root_tree(3));
        let mut last = 0.0;
        for budget in [5, 20, 80] {
            let p = measure_ssm(&m, 0, &LambdaShape::Sphere, 3, budget, 11, Engine::CdTree).unwrap();
            assert!(!p.exhaustive);
            assert!(p.delta >= last);
            last = p.delta;
        }
    }

    #[test]
    fn vssm_reduces_to_ssm_and_dominates_it() {
        let m = tree_model(SpinSystem::coloring(5), &ternary_root_tree(3));
        for d in 1..=3 {
            let ssm = measure_ssm(&m, 0, &LambdaShape::Sphere, d, 60, 3, Engine::CdTree).unwrap();
            let none = VssmOptions { line_budget: 0, ..Default::default() };
            let bare = measure_vssm(&m, 0, d, 60, 3, &none).unwrap();
            assert_eq!(bare.delta, ssm.delta);
            assert_eq!(bare.lines_tested, 1);
            for twin in [false, true] {
                let opts = VssmOptions { line_budget: 5, max_lines: 2, twin };
                let v = measure_vssm(&m, 0, d, 60, 3, &opts).unwrap();
                assert!(v.delta >= ssm.delta);
                assert!(v.lines_tested > 1 || d == 1 && twin);
            }
        }
    }

    #[test]
    fn decay_fits() {
        let profile = |deltas: Vec<f64>| MixingProfile {
            distances: (1..=deltas.len()).collect(),
            deltas,
            fitted_kappa: None,
            sample_budget: 0,
            exhaustive: true,
            points: Vec::new(),
        };
        let fit = fit_decay_rate(&profile((1..=5).map(|d| (-(d as f64)).exp()).collect())).unwrap();
        assert!((fit.kappa - 1.0).abs() < 1e-12);
        assert!((fit.r_squared.unwrap() - 1.0).abs() < 1e-12);
        let fit = fit_decay_rate(&profile((1..=5).map(|d| 0.3 * 0.5f64.powi(d)).collect())).unwrap();
        assert!((fit.kappa - 2f64.ln()).abs() < 1e-12);
        let fit = fit_decay_rate(&profile(vec![0.0; 4])).unwrap();
        assert!(fit.kappa.is_infinite() && fit.r_squared.is_none());
        assert!(fit_decay_rate(&profile(vec![0.5, 0.25, 0.0, 0.0])).is_err());
    }

    #[test]
    fn contraction_estimates() {
        let flat = SpinSystem::pairwise(Matrix::from_fn(3, |_, _| int(2)), vec![int(1), int(2), int(3)]);
        // Constant output up to rounding.
        assert!(contraction_check(&flat, 3, Transform::Identity, 200, 5).unwrap().k_hat < 1e-12);
        assert!(contraction_check(&flat, 3, Transform::Log, 200, 5).unwrap().k_hat < 1e-12);
        let half = estimate_lipschitz(4, 1, Transform::Identity, 500, 9, |kids: &[Vec<f64>]| {
            Some(kids[0].iter().map(|p| 0.5 * p + 0.125).collect())
        });
        assert!((half.k_hat - 0.5).abs() < 0.05, "{}", half.k_hat);
        let coloring = contraction_check(&SpinSystem::coloring(5), 3, Transform::Identity, 500, 1).unwrap();
        assert!(coloring.k_hat > 0.0 && coloring.samples == 500);
    }

    #[test]
    fn padded_extension_matches_all_ones() {
        let sys = SpinSystem::pairwise(Matrix::from_fn(3, |a, b| int(1 + i64::from(a != b))), vec![int(1), int(2), int(1)]);
        let cert = check_positively_alignable(&sys).unwrap().unwrap();
        let edges = [(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (4, 1)];
        let m = Model::graph(sys, Graph::new(5, &edges).unwrap(), BoundaryCondition::from_pairs([(4, 2)])).unwrap();
        for depth in 1..4 {
            let t = build_cd_tree(&m, 0, 0, Some(depth)).unwrap();
            let plain: RatioVector<Rational> = eval_ratios(&m, &t, &BoundaryInitialization::AllOnes).unwrap();
            assert_eq!(extension_ratios(&m, &t, 4, &cert).unwrap(), plain);
        }
    }
}
