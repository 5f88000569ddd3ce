//! Random small instances shared by the integration tests and the
//! acceptance run.
#![allow(dead_code)]

use cdtree_core::model::{Spin, Vertex};
use cdtree_core::num::{int, ratio};
use cdtree_core::{BoundaryCondition, Graph, Hypergraph, Matrix, Model, Rational, SpinSystem, Structure, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

/// Small non-negative rational; zero with probability `p_zero`.
pub fn weight<R: Rng>(rng: &mut R, p_zero: f64) -> Rational {
    if rng.gen_bool(p_zero) {
        int(0)
    } else {
        ratio(rng.gen_range(1..=4), rng.gen_range(1..=3))
    }
}

/// Connected graph on `n` vertices with maximum degree `max_degree`: a
/// random spanning tree plus up to `extra` further edges.
pub fn connected_graph<R: Rng>(rng: &mut R, n: usize, max_degree: usize, extra: usize) -> Graph {
    let mut deg = vec![0; n];
    let mut edges: Vec<(Vertex, Vertex)> = Vec::new();
    let mut order: Vec<Vertex> = (0..n).collect();
    order.shuffle(rng);
    for k in 1..n {
        let v = order[k];
        let open: Vec<Vertex> = order[..k].iter().copied().filter(|&u| deg[u] < max_degree).collect();
        // A path never runs out of open slots, so `open` is non-empty for
        // max_degree >= 2.
        let u = *open.choose(rng).expect("max_degree >= 2");
        edges.push((u.min(v), u.max(v)));
        deg[u] += 1;
        deg[v] += 1;
    }
    for _ in 0..extra {
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        let e = (u.min(v), u.max(v));
        if u == v || deg[u] >= max_degree || deg[v] >= max_degree || edges.contains(&e) {
            continue;
        }
        edges.push(e);
        deg[u] += 1;
        deg[v] += 1;
    }
    if rng.gen_bool(0.3) {
        let mut labels: Vec<u32> = (1..=edges.len() as u32).collect();
        labels.shuffle(rng);
        Graph::with_labels(n, &edges, labels).unwrap()
    } else {
        Graph::new(n, &edges).unwrap()
    }
}

/// Random pairwise system: colorings, random dense weights, or random
/// weights with zeros and per-edge overrides.
pub fn pairwise_system<R: Rng>(rng: &mut R, q: usize, g: &Graph) -> SpinSystem {
    let kind = rng.gen_range(0..4);
    let mut sys = if kind == 0 {
        SpinSystem::coloring(q)
    } else {
        let p_zero = if kind == 1 { 0.0 } else { 0.2 };
        let pair = Matrix::new(q, (0..q * q).map(|_| weight(rng, p_zero)).collect()).unwrap();
        let phi = (0..q).map(|_| weight(rng, p_zero / 2.0)).collect();
        SpinSystem::pairwise(pair, phi)
    };
    if kind == 3 {
        for &(u, v) in g.edges() {
            if rng.gen_bool(0.3) {
                let m = Matrix::new(q, (0..q * q).map(|_| weight(rng, 0.2)).collect()).unwrap();
                sys.edge_overrides.insert((u, v), m);
            }
        }
        for v in 0..g.n() {
            if rng.gen_bool(0.3) {
                sys.potentials.per_vertex.insert(v, (0..q).map(|_| weight(rng, 0.1)).collect());
            }
        }
    }
    sys
}

/// Freeze up to `max_frozen` random vertices other than `keep`.
pub fn boundary<R: Rng>(rng: &mut R, n: usize, q: usize, keep: Vertex, max_frozen: usize) -> BoundaryCondition {
    let mut vs: Vec<Vertex> = (0..n).filter(|&v| v != keep).collect();
    vs.shuffle(rng);
    let k = rng.gen_range(0..=max_frozen.min(vs.len()));
    let pairs: Vec<(Vertex, Spin)> = vs[..k].iter().map(|&v| (v, rng.gen_range(0..q))).collect();
    BoundaryCondition::from_pairs(pairs)
}

pub struct GraphInstance {
    pub model: Model,
    pub vertex: Vertex,
}

pub fn graph_instance<R: Rng>(rng: &mut R, max_n: usize, qs: &[usize]) -> GraphInstance {
    let n = rng.gen_range(3..=max_n);
    let q = *qs.choose(rng).unwrap();
    let extra = rng.gen_range(n / 2..=2 * n);
    let g = connected_graph(rng, n, 4, extra);
    let sys = pairwise_system(rng, q, &g);
    let vertex = rng.gen_range(0..n);
    let b = boundary(rng, n, q, vertex, n / 3);
    GraphInstance { model: Model::graph(sys, g, b).unwrap(), vertex }
}

/// Random hypergraph of 2- and 3-edges with random tensors.
pub fn hypergraph_instance<R: Rng>(rng: &mut R, max_n: usize, qs: &[usize]) -> GraphInstance {
    let n = rng.gen_range(2..=max_n);
    let q = *qs.choose(rng).unwrap();
    let m = rng.gen_range(1..=n + 1);
    let mut edges: Vec<Vec<Vertex>> = Vec::new();
    for _ in 0..m {
        let arity = if n >= 3 { rng.gen_range(2..=3) } else { 2 };
        let mut vs: Vec<Vertex> = (0..n).collect();
        vs.shuffle(rng);
        let mut e = vs[..arity].to_vec();
        e.sort_unstable();
        if !edges.contains(&e) {
            edges.push(e);
        }
    }
    let h = Hypergraph::new(n, &edges).unwrap();
    let mut sys = SpinSystem::coloring(q);
    sys.pair = None;
    let p_zero = if rng.gen_bool(0.5) { 0.0 } else { 0.25 };
    for e in h.hyperedges() {
        let t = if rng.gen_bool(0.2) {
            Tensor::not_all_equal(q, e.len())
        } else {
            let entries = (0..q.pow(e.len() as u32)).map(|_| weight(rng, p_zero)).collect();
            Tensor::new(q, e.len(), entries).unwrap()
        };
        sys.hyper_overrides.insert(e.clone(), t);
    }
    sys.potentials.default = Some((0..q).map(|_| weight(rng, p_zero / 2.0)).collect());
    let vertex = rng.gen_range(0..n);
    let b = boundary(rng, n, q, vertex, n / 3);
    GraphInstance { model: Model::new(sys, Structure::Hypergraph(h), b).unwrap(), vertex }
}

/// Hypergraph of the four 3-edges {1,2,3}, {1,2,5}, {1,3,4}, {2,5,4} on
/// five vertices (0-indexed here) with not-all-equal interactions.
pub fn five_vertex_hypergraph(q: usize) -> Model {
    let h = Hypergraph::new(5, &[vec![0, 1, 2], vec![0, 1, 4], vec![0, 2, 3], vec![1, 3, 4]]).unwrap();
    let mut sys = SpinSystem::coloring(q);
    sys.pair = None;
    for e in h.hyperedges() {
        sys.hyper_overrides.insert(e.clone(), Tensor::not_all_equal(q, 3));
    }
    Model::new(sys, Structure::Hypergraph(h), BoundaryCondition::new()).unwrap()
}

/// Complete tree where the root has `degree` children and every other
/// internal vertex `degree - 1`, of the given depth. Vertices are numbered
/// breadth-first; returns the graph and the leaves.
pub fn regular_tree(degree: usize, depth: usize) -> (Graph, Vec<Vertex>) {
    let mut edges = Vec::new();
    let mut frontier = vec![0];
    let mut next_id = 1;
    for level in 0..depth {
        let mut next = Vec::new();
        for &v in &frontier {
            let kids = if level == 0 { degree } else { degree - 1 };
            for _ in 0..kids {
                edges.push((v, next_id));
                next.push(next_id);
                next_id += 1;
            }
        }
        frontier = next;
    }
    (Graph::new(next_id, &edges).unwrap(), frontier)
}
