//! Spin systems on graphs and hypergraphs, boundary conditions, and the JSON
//! model document.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ModelError;
use crate::num::{format_rational, is_negative, parse_rational, rational_from_f64, Rational, Scalar};

pub type Vertex = usize;
pub type Spin = usize;

/// Dense `q x q` interaction matrix, `get(a, b)` = Φ(a, b).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Matrix {
    q: usize,
    entries: Vec<Rational>,
}

impl Matrix {
    pub fn new(q: usize, entries: Vec<Rational>) -> Result<Self, ModelError> {
        if entries.len() != q * q {
            return Err(ModelError::invalid(format!(
                "interaction matrix needs {} entries, got {}",
                q * q,
                entries.len()
            )));
        }
        Ok(Matrix { q, entries })
    }

    pub fn from_fn(q: usize, f: impl Fn(Spin, Spin) -> Rational) -> Self {
        let entries = (0..q * q).map(|k| f(k / q, k % q)).collect();
        Matrix { q, entries }
    }

    /// Proper-coloring interaction: 1 off the diagonal, 0 on it.
    pub fn coloring(q: usize) -> Self {
        Matrix::from_fn(q, |a, b| crate::num::int(i64::from(a != b)))
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn get(&self, a: Spin, b: Spin) -> &Rational {
        &self.entries[a * self.q + b]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.q, |a, b| self.get(b, a).clone())
    }

    pub fn entries(&self) -> &[Rational] {
        &self.entries
    }
}

/// Interaction tensor of a hyperedge; axis `k` belongs to the `k`-th vertex
/// of the (sorted) hyperedge. Row-major: the last axis varies fastest.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Tensor {
    q: usize,
    arity: usize,
    entries: Vec<Rational>,
}

impl Tensor {
    pub fn new(q: usize, arity: usize, entries: Vec<Rational>) -> Result<Self, ModelError> {
        if entries.len() != q.pow(arity as u32) {
            return Err(ModelError::invalid(format!(
                "arity-{arity} tensor needs {} entries, got {}",
                q.pow(arity as u32),
                entries.len()
            )));
        }
        Ok(Tensor { q, arity, entries })
    }

    pub fn from_fn(q: usize, arity: usize, f: impl Fn(&[Spin]) -> Rational) -> Self {
        let mut spins = vec![0; arity];
        let entries = (0..q.pow(arity as u32))
            .map(|idx| {
                decode_index(idx, q, &mut spins);
                f(&spins)
            })
            .collect();
        Tensor { q, arity, entries }
    }

    /// 1 unless every vertex of the hyperedge takes the same spin.
    pub fn not_all_equal(q: usize, arity: usize) -> Self {
        Tensor::from_fn(q, arity, |s| crate::num::int(i64::from(s.iter().any(|&x| x != s[0]))))
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Tensor { q: m.q, arity: 2, entries: m.entries.clone() }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn get(&self, spins: &[Spin]) -> &Rational {
        &self.entries[encode_index(spins, self.q)]
    }

    pub fn entries(&self) -> &[Rational] {
        &self.entries
    }

    /// Reorder axes: axis `k` of the result is axis `perm[k]` of `self`.
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        Tensor::from_fn(self.q, self.arity, |spins| {
            let mut src = vec![0; self.arity];
            for (k, &p) in perm.iter().enumerate() {
                src[p] = spins[k];
            }
            self.get(&src).clone()
        })
    }
}

fn encode_index(spins: &[Spin], q: usize) -> usize {
    spins.iter().fold(0, |acc, &s| acc * q + s)
}

fn decode_index(mut idx: usize, q: usize, out: &mut [Spin]) {
    for slot in out.iter_mut().rev() {
        *slot = idx % q;
        idx /= q;
    }
}

/// Vertex potentials φ: a default vector plus per-vertex overrides.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Potentials {
    pub default: Option<Vec<Rational>>,
    pub per_vertex: BTreeMap<Vertex, Vec<Rational>>,
}

impl Potentials {
    pub fn uniform(values: Vec<Rational>) -> Self {
        Potentials { default: Some(values), per_vertex: BTreeMap::new() }
    }

    pub fn get(&self, v: Vertex) -> Option<&[Rational]> {
        self.per_vertex.get(&v).or(self.default.as_ref()).map(Vec::as_slice)
    }
}

/// The interacting system: spin alphabet, interactions Φ and potentials φ.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinSystem {
    pub q: usize,
    pub spin_names: Option<Vec<String>>,
    /// Default pairwise interaction used by every 2-edge without an override.
    pub pair: Option<Matrix>,
    /// Per-edge overrides keyed `(lo, hi)`, oriented `Φ(x_lo, x_hi)`.
    pub edge_overrides: BTreeMap<(Vertex, Vertex), Matrix>,
    /// Per-hyperedge tensors keyed by the sorted vertex list.
    pub hyper_overrides: BTreeMap<Vec<Vertex>, Tensor>,
    pub potentials: Potentials,
}

impl SpinSystem {
    /// Spatially invariant pairwise system.
    pub fn pairwise(pair: Matrix, potentials: Vec<Rational>) -> Self {
        SpinSystem {
            q: pair.q(),
            spin_names: None,
            pair: Some(pair),
            edge_overrides: BTreeMap::new(),
            hyper_overrides: BTreeMap::new(),
            potentials: Potentials::uniform(potentials),
        }
    }

    /// q-coloring with unit potentials.
    pub fn coloring(q: usize) -> Self {
        SpinSystem::pairwise(Matrix::coloring(q), vec![crate::num::int(1); q])
    }

    pub fn potential(&self, v: Vertex) -> &[Rational] {
        self.potentials.get(v).expect("validated model has potentials for every vertex")
    }

    /// Φ on edge `(u, w)` oriented so that the first index is `u`'s spin.
    pub fn edge_matrix(&self, u: Vertex, w: Vertex) -> Matrix {
        let key = (u.min(w), u.max(w));
        let m = self
            .edge_overrides
            .get(&key)
            .or(self.pair.as_ref())
            .expect("validated model has an interaction for every edge");
        if u <= w {
            m.clone()
        } else {
            m.transpose()
        }
    }

    /// Tensor for a sorted hyperedge.
    pub fn hyper_tensor(&self, edge: &[Vertex]) -> Tensor {
        if let Some(t) = self.hyper_overrides.get(edge) {
            return t.clone();
        }
        if edge.len() == 2 {
            return Tensor::from_matrix(&self.edge_matrix(edge[0], edge[1]));
        }
        panic!("validated model has a tensor for every hyperedge")
    }

    /// True when no per-edge, per-hyperedge or per-vertex override is present.
    pub fn is_spatially_invariant(&self) -> bool {
        self.edge_overrides.is_empty()
            && self.hyper_overrides.is_empty()
            && self.potentials.per_vertex.is_empty()
            && self.pair.is_some()
            && self.potentials.default.is_some()
    }

    pub fn spin_label(&self, s: Spin) -> String {
        match &self.spin_names {
            Some(names) => names[s].clone(),
            None => s.to_string(),
        }
    }

    /// Same system with every vertex in `vertices` forbidden from taking `spin`
    /// (its potential entry set to zero), i.e. conditioned on that event.
    pub fn forbid_spin(&self, spin: Spin, vertices: impl IntoIterator<Item = Vertex>) -> SpinSystem {
        let mut out = self.clone();
        for v in vertices {
            let mut phi = self.potential(v).to_vec();
            phi[spin] = crate::num::int(0);
            out.potentials.per_vertex.insert(v, phi);
        }
        out
    }

    fn validate(&self, structure: &Structure) -> Result<(), ModelError> {
        if self.q < 2 {
            return Err(ModelError::invalid("q must be at least 2"));
        }
        if let Some(names) = &self.spin_names {
            if names.len() != self.q {
                return Err(ModelError::invalid("spin_names must have q entries"));
            }
            let distinct: BTreeSet<_> = names.iter().collect();
            if distinct.len() != names.len() {
                return Err(ModelError::invalid("spin names must be distinct"));
            }
        }
        let check_nonneg = |values: &[Rational], what: &str| -> Result<(), ModelError> {
            if values.iter().any(is_negative) {
                return Err(ModelError::invalid(format!("{what} must be non-negative")));
            }
            Ok(())
        };
        if let Some(m) = &self.pair {
            if m.q() != self.q {
                return Err(ModelError::invalid("Phi must be q x q"));
            }
            check_nonneg(m.entries(), "interaction")?;
        }
        for m in self.edge_overrides.values() {
            if m.q() != self.q {
                return Err(ModelError::invalid("per-edge Phi must be q x q"));
            }
            check_nonneg(m.entries(), "interaction")?;
        }
        for (edge, t) in &self.hyper_overrides {
            if t.arity() != edge.len() || t.q != self.q {
                return Err(ModelError::invalid(format!("tensor shape mismatch for hyperedge {edge:?}")));
            }
            check_nonneg(t.entries(), "interaction")?;
        }
        if let Some(d) = &self.potentials.default {
            if d.len() != self.q {
                return Err(ModelError::invalid("phi must have q entries"));
            }
            check_nonneg(d, "potential")?;
        }
        for (v, p) in &self.potentials.per_vertex {
            if *v >= structure.n() {
                return Err(ModelError::invalid(format!("potential for unknown vertex {v}")));
            }
            if p.len() != self.q {
                return Err(ModelError::invalid("phi must have q entries"));
            }
            check_nonneg(p, "potential")?;
        }
        for v in 0..structure.n() {
            if self.potentials.get(v).is_none() {
                return Err(ModelError::invalid(format!("vertex {v} has no potential")));
            }
        }
        match structure {
            Structure::Graph(g) => {
                if !self.hyper_overrides.is_empty() {
                    return Err(ModelError::invalid("Phi_hyper given for a pairwise graph"));
                }
                for key in self.edge_overrides.keys() {
                    if g.edge_index(key.0, key.1).is_none() {
                        return Err(ModelError::invalid(format!(
                            "Phi_edges override references missing edge {}-{}",
                            key.0, key.1
                        )));
                    }
                }
                if self.pair.is_none() && g.edges().len() > self.edge_overrides.len() {
                    return Err(ModelError::invalid("Phi is required for edges without an override"));
                }
            }
            Structure::Hypergraph(h) => {
                let edges: BTreeSet<&[Vertex]> = h.hyperedges().iter().map(Vec::as_slice).collect();
                for key in self.edge_overrides.keys() {
                    if !edges.contains(&[key.0, key.1][..]) {
                        return Err(ModelError::invalid(format!(
                            "Phi_edges override references missing edge {}-{}",
                            key.0, key.1
                        )));
                    }
                }
                for key in self.hyper_overrides.keys() {
                    if !edges.contains(key.as_slice()) {
                        return Err(ModelError::invalid(format!(
                            "Phi_hyper override references missing hyperedge {key:?}"
                        )));
                    }
                }
                for e in h.hyperedges() {
                    let covered = self.hyper_overrides.contains_key(e)
                        || (e.len() == 2
                            && (self.pair.is_some() || self.edge_overrides.contains_key(&(e[0], e[1]))));
                    if !covered {
                        return Err(ModelError::invalid(format!("hyperedge {e:?} has no interaction tensor")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Simple undirected graph with a total order (labels) on its edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(Vertex, Vertex)>,
    labels: Vec<u32>,
    /// `(neighbor, edge index)` sorted by edge label.
    adjacency: Vec<Vec<(Vertex, usize)>>,
}

impl Graph {
    /// Graph with canonical lexicographic edge labels.
    pub fn new(n: usize, edges: &[(Vertex, Vertex)]) -> Result<Self, ModelError> {
        let normalized: Vec<(Vertex, Vertex)> = edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        let labels = lexicographic_labels(&normalized);
        Graph::with_labels(n, edges, labels)
    }

    /// Graph with user-supplied labels (`labels[i]` labels `edges[i]`).
    pub fn with_labels(n: usize, edges: &[(Vertex, Vertex)], labels: Vec<u32>) -> Result<Self, ModelError> {
        let mut seen = BTreeSet::new();
        let mut normalized = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(ModelError::invalid(format!("edge {a}-{b} references a vertex >= n = {n}")));
            }
            if a == b {
                return Err(ModelError::invalid(format!("self-loop at vertex {a}")));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(ModelError::invalid(format!("duplicate edge {}-{}", e.0, e.1)));
            }
            normalized.push(e);
        }
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        if labels.len() != normalized.len() || sorted.iter().enumerate().any(|(i, &l)| l as usize != i + 1) {
            return Err(ModelError::invalid("edge labels must be a permutation of 1..|E|"));
        }
        let mut adjacency = vec![Vec::new(); n];
        for (idx, &(a, b)) in normalized.iter().enumerate() {
            adjacency[a].push((b, idx));
            adjacency[b].push((a, idx));
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(_, idx)| labels[idx]);
        }
        Ok(Graph { n, edges: normalized, labels, adjacency })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Edges as `(lo, hi)` pairs in input order.
    pub fn edges(&self) -> &[(Vertex, Vertex)] {
        &self.edges
    }

    pub fn label(&self, edge: usize) -> u32 {
        self.labels[edge]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Incident `(neighbor, edge index)` pairs in increasing label order.
    pub fn neighbors(&self, v: Vertex) -> &[(Vertex, usize)] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: Vertex) -> usize {
        self.adjacency[v].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn edge_index(&self, a: Vertex, b: Vertex) -> Option<usize> {
        if a >= self.n {
            return None;
        }
        self.adjacency[a].iter().find(|&&(w, _)| w == b).map(|&(_, idx)| idx)
    }

    /// Same vertices and interactions, encoded as 2-uniform hypergraph.
    pub fn to_hypergraph(&self) -> Hypergraph {
        let edges: Vec<Vec<Vertex>> = self.edges.iter().map(|&(a, b)| vec![a, b]).collect();
        Hypergraph::new(self.n, &edges).expect("graph edges form a valid hypergraph")
    }

    pub fn is_connected(&self) -> bool {
        self.n == 0 || (0..self.n).all(|v| graph_distance(self, 0, &[v].into()).is_some())
    }
}

fn lexicographic_labels(edges: &[(Vertex, Vertex)]) -> Vec<u32> {
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by_key(|&i| edges[i]);
    let mut labels = vec![0; edges.len()];
    for (rank, i) in order.into_iter().enumerate() {
        labels[i] = rank as u32 + 1;
    }
    labels
}

/// Labels ordering the edges lexicographically by `(min endpoint, max endpoint)`.
pub fn canonical_edge_order(g: &Graph) -> Vec<u32> {
    lexicographic_labels(g.edges())
}

/// Shortest-path distance from `v` to the nearest vertex of `targets`;
/// `None` stands for infinity.
pub fn graph_distance(g: &Graph, v: Vertex, targets: &BTreeSet<Vertex>) -> Option<usize> {
    if targets.is_empty() {
        return None;
    }
    let mut dist = vec![usize::MAX; g.n()];
    let mut queue = VecDeque::from([v]);
    dist[v] = 0;
    while let Some(u) = queue.pop_front() {
        if targets.contains(&u) {
            return Some(dist[u]);
        }
        for &(w, _) in g.neighbors(u) {
            if dist[w] == usize::MAX {
                dist[w] = dist[u] + 1;
                queue.push_back(w);
            }
        }
    }
    None
}

/// Hypergraph whose hyperedges are stored as sorted vertex lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hypergraph {
    n: usize,
    hyperedges: Vec<Vec<Vertex>>,
}

impl Hypergraph {
    pub fn new(n: usize, hyperedges: &[Vec<Vertex>]) -> Result<Self, ModelError> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(hyperedges.len());
        for e in hyperedges {
            let mut sorted = e.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != e.len() {
                return Err(ModelError::invalid(format!("hyperedge {e:?} repeats a vertex")));
            }
            if sorted.len() < 2 {
                return Err(ModelError::invalid(format!("hyperedge {e:?} has fewer than 2 vertices")));
            }
            if let Some(&v) = sorted.iter().find(|&&v| v >= n) {
                return Err(ModelError::invalid(format!("hyperedge {e:?} references vertex {v} >= n = {n}")));
            }
            if !seen.insert(sorted.clone()) {
                return Err(ModelError::invalid(format!("duplicate hyperedge {e:?}")));
            }
            out.push(sorted);
        }
        Ok(Hypergraph { n, hyperedges: out })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn hyperedges(&self) -> &[Vec<Vertex>] {
        &self.hyperedges
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Structure {
    Graph(Graph),
    Hypergraph(Hypergraph),
}

impl Structure {
    pub fn n(&self) -> usize {
        match self {
            Structure::Graph(g) => g.n(),
            Structure::Hypergraph(h) => h.n(),
        }
    }

    pub fn as_graph(&self) -> Option<&Graph> {
        match self {
            Structure::Graph(g) => Some(g),
            Structure::Hypergraph(_) => None,
        }
    }

    /// Vertex lists of all interactions (edges or hyperedges), sorted.
    pub fn factor_scopes(&self) -> Vec<Vec<Vertex>> {
        match self {
            Structure::Graph(g) => g.edges().iter().map(|&(a, b)| vec![a, b]).collect(),
            Structure::Hypergraph(h) => h.hyperedges().to_vec(),
        }
    }
}

/// Frozen vertex set Λ with its spins σ_Λ.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct BoundaryCondition {
    assignments: BTreeMap<Vertex, Spin>,
}

impl BoundaryCondition {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Vertex, Spin)>) -> Self {
        BoundaryCondition { assignments: pairs.into_iter().collect() }
    }

    pub fn get(&self, v: Vertex) -> Option<Spin> {
        self.assignments.get(&v).copied()
    }

    pub fn is_frozen(&self, v: Vertex) -> bool {
        self.assignments.contains_key(&v)
    }

    pub fn with(&self, v: Vertex, s: Spin) -> Self {
        let mut out = self.clone();
        out.assignments.insert(v, s);
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vertex, Spin)> + '_ {
        self.assignments.iter().map(|(&v, &s)| (v, s))
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn vertices(&self) -> BTreeSet<Vertex> {
        self.assignments.keys().copied().collect()
    }

    /// Vertices frozen in both conditions but to different spins, plus
    /// vertices frozen in only one of them.
    pub fn differing(&self, other: &BoundaryCondition) -> BTreeSet<Vertex> {
        let keys: BTreeSet<Vertex> = self.assignments.keys().chain(other.assignments.keys()).copied().collect();
        keys.into_iter().filter(|&v| self.get(v) != other.get(v)).collect()
    }

    fn validate(&self, n: usize, q: usize) -> Result<(), ModelError> {
        for (v, s) in self.iter() {
            if v >= n {
                return Err(ModelError::invalid(format!("boundary references vertex {v} >= n = {n}")));
            }
            if s >= q {
                return Err(ModelError::invalid(format!("boundary spin {s} at vertex {v} is out of range")));
            }
        }
        Ok(())
    }
}

/// A validated (system, structure, boundary) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub system: SpinSystem,
    pub structure: Structure,
    pub boundary: BoundaryCondition,
}

impl Model {
    pub fn new(system: SpinSystem, structure: Structure, boundary: BoundaryCondition) -> Result<Self, ModelError> {
        system.validate(&structure)?;
        boundary.validate(structure.n(), system.q)?;
        Ok(Model { system, structure, boundary })
    }

    pub fn graph(system: SpinSystem, graph: Graph, boundary: BoundaryCondition) -> Result<Self, ModelError> {
        Model::new(system, Structure::Graph(graph), boundary)
    }

    pub fn q(&self) -> usize {
        self.system.q
    }

    pub fn n(&self) -> usize {
        self.structure.n()
    }

    /// The same model with a different boundary condition.
    pub fn with_boundary(&self, boundary: BoundaryCondition) -> Result<Self, ModelError> {
        boundary.validate(self.n(), self.q())?;
        Ok(Model { boundary, ..self.clone() })
    }

    /// Re-encode a pairwise model as a hypergraph of 2-edges.
    pub fn as_hypergraph(&self) -> Model {
        match &self.structure {
            Structure::Hypergraph(_) => self.clone(),
            Structure::Graph(g) => Model {
                system: self.system.clone(),
                structure: Structure::Hypergraph(g.to_hypergraph()),
                boundary: self.boundary.clone(),
            },
        }
    }

    /// Interactions and potentials converted into the scalar type `S`.
    pub fn weights<S: Scalar>(&self) -> Weights<S> {
        Weights::compile(self)
    }
}

/// One interaction of the compiled model. The table is indexed like
/// [`Tensor`] over `vertices` (sorted).
#[derive(Clone, Debug)]
pub struct Factor<S> {
    pub vertices: Vec<Vertex>,
    pub table: Vec<S>,
}

impl<S: Scalar> Factor<S> {
    pub fn value(&self, q: usize, spins: &[Spin]) -> &S {
        &self.table[encode_index(spins, q)]
    }
}

/// Model weights in scalar type `S`, ready for the engines.
///
/// For graphs, factor `i` is edge `i` of the graph.
#[derive(Clone, Debug)]
pub struct Weights<S> {
    pub q: usize,
    pub potentials: Vec<Vec<S>>,
    pub factors: Vec<Factor<S>>,
    /// Factor indices incident to each vertex, ascending.
    pub incident: Vec<Vec<usize>>,
}

impl<S: Scalar> Weights<S> {
    fn compile(model: &Model) -> Self {
        let sys = &model.system;
        let n = model.n();
        let potentials = (0..n)
            .map(|v| sys.potential(v).iter().map(S::from_rational).collect())
            .collect();
        let factors: Vec<Factor<S>> = model
            .structure
            .factor_scopes()
            .into_iter()
            .map(|scope| {
                let tensor = sys.hyper_tensor(&scope);
                Factor { table: tensor.entries().iter().map(S::from_rational).collect(), vertices: scope }
            })
            .collect();
        let mut incident = vec![Vec::new(); n];
        for (idx, f) in factors.iter().enumerate() {
            for &v in &f.vertices {
                incident[v].push(idx);
            }
        }
        Weights { q: sys.q, potentials, factors, incident }
    }

    /// Pairwise weight Φ(x_from, x_to) on 2-factor `factor`.
    pub fn pair(&self, factor: usize, from: Vertex, s_from: Spin, s_to: Spin) -> &S {
        let f = &self.factors[factor];
        if f.vertices[0] == from {
            &f.table[s_from * self.q + s_to]
        } else {
            &f.table[s_to * self.q + s_from]
        }
    }
}

// ---------------------------------------------------------------------------
// JSON document
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    q: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spins: Option<Vec<String>>,
    phi: Value,
    #[serde(rename = "Phi", default, skip_serializing_if = "Option::is_none")]
    pair: Option<Vec<Vec<Value>>>,
    #[serde(rename = "Phi_edges", default, skip_serializing_if = "Option::is_none")]
    edge_overrides: Option<BTreeMap<String, Vec<Vec<Value>>>>,
    #[serde(rename = "Phi_hyper", default, skip_serializing_if = "Option::is_none")]
    hyper_overrides: Option<BTreeMap<String, Value>>,
    graph: GraphDoc,
    #[serde(default)]
    boundary: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_order: Option<Vec<[Vertex; 2]>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edges: Option<Vec<[Vertex; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hyperedges: Option<Vec<Vec<Vertex>>>,
}

fn number(v: &Value, field: &str) -> Result<Rational, ModelError> {
    let at = |m: String| ModelError::invalid(format!("{field}: {m}"));
    match v {
        Value::String(s) => parse_rational(s).map_err(|e| at(e.to_string())),
        Value::Number(x) => {
            if let Some(i) = x.as_i64() {
                Ok(crate::num::int(i))
            } else {
                let f = x.as_f64().ok_or_else(|| at(format!("invalid number {x}")))?;
                rational_from_f64(f).ok_or_else(|| at(format!("invalid number {x}")))
            }
        }
        other => Err(at(format!("expected a number or \"p/q\" string, got {other}"))),
    }
}

fn vector(values: &[Value], field: &str) -> Result<Vec<Rational>, ModelError> {
    values.iter().enumerate().map(|(i, v)| number(v, &format!("{field}[{i}]"))).collect()
}

fn matrix(rows: &[Vec<Value>], q: usize, field: &str) -> Result<Matrix, ModelError> {
    if rows.len() != q || rows.iter().any(|r| r.len() != q) {
        return Err(ModelError::invalid(format!("{field}: must be a {q} x {q} matrix")));
    }
    let mut entries = Vec::with_capacity(q * q);
    for (i, row) in rows.iter().enumerate() {
        entries.extend(vector(row, &format!("{field}[{i}]"))?);
    }
    Matrix::new(q, entries)
}

fn flatten_tensor(v: &Value, q: usize, depth: usize, field: &str, out: &mut Vec<Rational>) -> Result<(), ModelError> {
    if depth == 0 {
        out.push(number(v, field)?);
        return Ok(());
    }
    match v {
        Value::Array(items) if items.len() == q => {
            for (i, item) in items.iter().enumerate() {
                flatten_tensor(item, q, depth - 1, &format!("{field}[{i}]"), out)?;
            }
            Ok(())
        }
        _ => Err(ModelError::invalid(format!("{field}: expected an array of length {q}"))),
    }
}

fn parse_key(key: &str, field: &str) -> Result<Vec<Vertex>, ModelError> {
    key.split('-')
        .map(|p| p.trim().parse::<Vertex>())
        .collect::<Result<_, _>>()
        .map_err(|_| ModelError::invalid(format!("{field}: bad vertex key {key:?}")))
}

fn nest(entries: &[Rational], q: usize, arity: usize) -> Value {
    if arity == 0 {
        return Value::String(format_rational(&entries[0]));
    }
    let stride = entries.len() / q;
    Value::Array((0..q).map(|k| nest(&entries[k * stride..(k + 1) * stride], q, arity - 1)).collect())
}

fn render_vec(values: &[Rational]) -> Value {
    Value::Array(values.iter().map(|r| Value::String(format_rational(r))).collect())
}

fn render_matrix(m: &Matrix) -> Vec<Vec<Value>> {
    (0..m.q())
        .map(|a| (0..m.q()).map(|b| Value::String(format_rational(m.get(a, b)))).collect())
        .collect()
}

/// Parse and validate a JSON model document.
pub fn load_model(text: &str) -> Result<Model, ModelError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: ModelDoc = serde_path_to_error::deserialize(de).map_err(|e| ModelError::Parse {
        line: e.inner().line(),
        column: e.inner().column(),
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    let q = doc.q;
    if q < 2 {
        return Err(ModelError::invalid("q must be at least 2"));
    }

    let potentials = match &doc.phi {
        Value::Array(items) => Potentials::uniform(vector(items, "phi")?),
        Value::Object(map) => {
            let mut pots = Potentials::default();
            for (key, val) in map {
                let items = val
                    .as_array()
                    .ok_or_else(|| ModelError::invalid(format!("phi.{key}: expected an array")))?;
                let values = vector(items, &format!("phi.{key}"))?;
                if key == "default" {
                    pots.default = Some(values);
                } else {
                    let v: Vertex = key
                        .parse()
                        .map_err(|_| ModelError::invalid(format!("phi: bad vertex key {key:?}")))?;
                    pots.per_vertex.insert(v, values);
                }
            }
            pots
        }
        _ => return Err(ModelError::invalid("phi: expected an array or an object")),
    };

    let pair = doc.pair.as_ref().map(|rows| matrix(rows, q, "Phi")).transpose()?;

    let mut edge_overrides = BTreeMap::new();
    for (key, rows) in doc.edge_overrides.iter().flatten() {
        let field = format!("Phi_edges.{key}");
        let ends = parse_key(key, &field)?;
        if ends.len() != 2 || ends[0] == ends[1] {
            return Err(ModelError::invalid(format!("{field}: expected a key \"i-j\"")));
        }
        let m = matrix(rows, q, &field)?;
        let (lo, hi, m) = if ends[0] < ends[1] { (ends[0], ends[1], m) } else { (ends[1], ends[0], m.transpose()) };
        if edge_overrides.insert((lo, hi), m).is_some() {
            return Err(ModelError::invalid(format!("{field}: duplicate override")));
        }
    }

    let mut hyper_overrides = BTreeMap::new();
    for (key, val) in doc.hyper_overrides.iter().flatten() {
        let field = format!("Phi_hyper.{key}");
        let verts = parse_key(key, &field)?;
        let mut entries = Vec::new();
        flatten_tensor(val, q, verts.len(), &field, &mut entries)?;
        let tensor = Tensor::new(q, verts.len(), entries)?;
        let mut perm: Vec<usize> = (0..verts.len()).collect();
        perm.sort_by_key(|&k| verts[k]);
        let mut sorted = verts.clone();
        sorted.sort_unstable();
        if hyper_overrides.insert(sorted, tensor.permute(&perm)).is_some() {
            return Err(ModelError::invalid(format!("{field}: duplicate override")));
        }
    }

    let structure = match (&doc.graph.edges, &doc.graph.hyperedges) {
        (Some(edges), None) => {
            let pairs: Vec<(Vertex, Vertex)> = edges.iter().map(|e| (e[0], e[1])).collect();
            let graph = match &doc.edge_order {
                None => Graph::new(doc.graph.n, &pairs)?,
                Some(order) => {
                    let normalized: Vec<(Vertex, Vertex)> = pairs.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
                    let mut labels = vec![0u32; pairs.len()];
                    if order.len() != pairs.len() {
                        return Err(ModelError::invalid("edge_order must list every edge exactly once"));
                    }
                    for (rank, e) in order.iter().enumerate() {
                        let key = (e[0].min(e[1]), e[0].max(e[1]));
                        let idx = normalized
                            .iter()
                            .position(|&x| x == key)
                            .ok_or_else(|| ModelError::invalid(format!("edge_order lists unknown edge {}-{}", e[0], e[1])))?;
                        labels[idx] = rank as u32 + 1;
                    }
                    Graph::with_labels(doc.graph.n, &pairs, labels)?
                }
            };
            Structure::Graph(graph)
        }
        (None, Some(hyperedges)) => {
            if doc.edge_order.is_some() {
                return Err(ModelError::invalid("edge_order applies to pairwise graphs only"));
            }
            Structure::Hypergraph(Hypergraph::new(doc.graph.n, hyperedges)?)
        }
        _ => return Err(ModelError::invalid("graph must have exactly one of \"edges\" or \"hyperedges\"")),
    };

    let system = SpinSystem {
        q,
        spin_names: doc.spins.clone(),
        pair,
        edge_overrides,
        hyper_overrides,
        potentials,
    };

    let mut assignments = Vec::new();
    for (key, val) in &doc.boundary {
        let v: Vertex = key
            .parse()
            .map_err(|_| ModelError::invalid(format!("boundary: bad vertex key {key:?}")))?;
        let spin = parse_spin(&system, val).map_err(|m| ModelError::invalid(format!("boundary.{key}: {m}")))?;
        assignments.push((v, spin));
    }
    Model::new(system, structure, BoundaryCondition::from_pairs(assignments))
}

/// Accepts a spin index or, when names are declared, a spin name.
pub fn parse_spin(system: &SpinSystem, val: &Value) -> Result<Spin, String> {
    match val {
        Value::Number(x) => x
            .as_u64()
            .map(|s| s as Spin)
            .filter(|&s| s < system.q)
            .ok_or_else(|| format!("spin {x} out of range")),
        Value::String(name) => system
            .spin_names
            .as_ref()
            .and_then(|names| names.iter().position(|n| n == name))
            .or_else(|| name.parse::<Spin>().ok().filter(|&s| s < system.q && system.spin_names.is_none()))
            .ok_or_else(|| format!("unknown spin {name:?}")),
        other => Err(format!("expected a spin, got {other}")),
    }
}

/// Serialize a model; every number is written as an exact `"p/q"` string.
pub fn model_to_json(model: &Model) -> String {
    let sys = &model.system;
    let phi = if sys.potentials.per_vertex.is_empty() {
        render_vec(sys.potentials.default.as_deref().unwrap_or(&[]))
    } else {
        let mut map = serde_json::Map::new();
        if let Some(d) = &sys.potentials.default {
            map.insert("default".into(), render_vec(d));
        }
        for (v, p) in &sys.potentials.per_vertex {
            map.insert(v.to_string(), render_vec(p));
        }
        Value::Object(map)
    };
    let edge_overrides = (!sys.edge_overrides.is_empty()).then(|| {
        sys.edge_overrides
            .iter()
            .map(|((a, b), m)| (format!("{a}-{b}"), render_matrix(m)))
            .collect()
    });
    let hyper_overrides = (!sys.hyper_overrides.is_empty()).then(|| {
        sys.hyper_overrides
            .iter()
            .map(|(e, t)| {
                let key = e.iter().map(ToString::to_string).collect::<Vec<_>>().join("-");
                (key, nest(t.entries(), sys.q, t.arity()))
            })
            .collect()
    });
    let (graph, edge_order) = match &model.structure {
        Structure::Graph(g) => {
            let edges: Vec<[Vertex; 2]> = g.edges().iter().map(|&(a, b)| [a, b]).collect();
            let mut order: Vec<usize> = (0..edges.len()).collect();
            order.sort_by_key(|&i| g.label(i));
            let custom = g.labels() != canonical_edge_order(g).as_slice();
            (
                GraphDoc { n: g.n(), edges: Some(edges.clone()), hyperedges: None },
                custom.then(|| order.iter().map(|&i| edges[i]).collect()),
            )
        }
        Structure::Hypergraph(h) => (
            GraphDoc { n: h.n(), edges: None, hyperedges: Some(h.hyperedges().to_vec()) },
            None,
        ),
    };
    let doc = ModelDoc {
        q: sys.q,
        spins: sys.spin_names.clone(),
        phi,
        pair: sys.pair.as_ref().map(render_matrix),
        edge_overrides,
        hyper_overrides,
        graph,
        boundary: model.boundary.iter().map(|(v, s)| (v.to_string(), Value::from(s))).collect(),
        edge_order,
    };
    serde_json::to_string_pretty(&doc).expect("model document serializes")
}
