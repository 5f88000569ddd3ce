//! Construction of the correlation-decay tree.
//!
//! The tree is the tree of self-avoiding walks from a root vertex, with every
//! walk that closes a cycle kept as a leaf. Such a leaf is either frozen to the
//! reference spin (closing edge labelled higher than the edge that began the
//! cycle) or joined by a coupling line to the earlier occurrence of its vertex
//! (closing edge labelled lower). Walks stop at frozen vertices, at
//! cycle-closing vertices, and optionally at a depth limit.

use std::fmt::Write as _;

use crate::error::ComputeError;
use crate::model::{BoundaryCondition, Graph, Model, Spin, Vertex};

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Internal,
    /// Frozen by the boundary condition, or (with `closes_at` set) a copy of
    /// an earlier node's vertex closing a cycle "upwards".
    Frozen { spin: Spin, closes_at: Option<NodeId> },
    /// Takes whatever spin its coupling-line top is being queried at.
    Coupled { top: NodeId },
    /// Cut off by the depth limit; evaluated from a boundary initialization.
    Boundary,
}

impl NodeKind {
    pub fn is_leaf_kind(&self) -> bool {
        !matches!(self, NodeKind::Internal)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    /// Vertex of the graph this node copies; `None` for padding nodes that
    /// have no counterpart in the graph.
    pub vertex: Option<Vertex>,
    /// Index of the graph edge from the parent into this node.
    pub edge: Option<usize>,
    pub edge_label: Option<u32>,
    pub kind: NodeKind,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub depth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CouplingLine {
    pub top: NodeId,
    pub bottom: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CdTree {
    nodes: Vec<TreeNode>,
    lines: Vec<CouplingLine>,
    reference: Spin,
}

impl CdTree {
    pub const ROOT: NodeId = 0;

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn coupling_lines(&self) -> &[CouplingLine] {
        &self.lines
    }

    pub fn reference(&self) -> Spin {
        self.reference
    }

    pub fn parents(&self) -> Vec<Option<NodeId>> {
        self.nodes.iter().map(|n| n.parent).collect()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn nodes_at_depth(&self, depth: usize) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].depth == depth).collect()
    }

    /// Origin vertices along the root-to-`id` path.
    pub fn walk(&self, id: NodeId) -> Vec<Option<Vertex>> {
        let mut out = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            out.push(self.nodes[c].vertex);
            cur = self.nodes[c].parent;
        }
        out.reverse();
        out
    }

    /// True when `a` is a strict ancestor of `b`.
    pub fn is_ancestor(&self, a: NodeId, b: NodeId) -> bool {
        is_strict_ancestor(&self.parents(), a, b)
    }

    /// Replace the spin of a frozen node.
    pub fn set_frozen_spin(&mut self, id: NodeId, spin: Spin) {
        self.nodes[id].kind = NodeKind::Frozen { spin, closes_at: None };
    }

    /// Add coupling lines to an existing tree. Each bottom node becomes a
    /// coupled leaf; anything below it is ignored by evaluation.
    pub fn add_coupling_lines(&mut self, lines: &[CouplingLine]) -> Result<(), CouplingViolation> {
        let mut all = self.lines.clone();
        all.extend_from_slice(lines);
        validate_coupling_lines(&self.parents(), &all)?;
        for l in lines {
            self.nodes[l.bottom].kind = NodeKind::Coupled { top: l.top };
        }
        self.lines = all;
        Ok(())
    }

    /// Pad every non-fixed node with fewer than `degree` tree neighbours by
    /// boundary children that have no graph counterpart, so that the tree
    /// becomes a subtree of the infinite `degree`-regular tree.
    pub fn pad_to_degree(&self, degree: usize) -> CdTree {
        let mut out = self.clone();
        for id in 0..self.nodes.len() {
            let node = &self.nodes[id];
            if node.kind != NodeKind::Internal {
                continue;
            }
            let neighbours = node.children.len() + usize::from(node.parent.is_some());
            for _ in neighbours..degree {
                let child = out.nodes.len();
                out.nodes.push(TreeNode {
                    vertex: None,
                    edge: None,
                    edge_label: None,
                    kind: NodeKind::Boundary,
                    parent: Some(id),
                    children: Vec::new(),
                    depth: node.depth + 1,
                });
                out.nodes[id].children.push(child);
            }
        }
        out
    }

    /// Graphviz rendering; coupling lines are dashed and do not constrain
    /// the layout.
    pub fn to_dot(&self, spin_label: &dyn Fn(Spin) -> String) -> String {
        let mut out = String::from("digraph cdtree {\n");
        for (id, node) in self.nodes.iter().enumerate() {
            let name = node.vertex.map_or_else(|| "*".to_string(), |v| v.to_string());
            let attrs = match &node.kind {
                NodeKind::Internal => format!("label=\"{name}\""),
                NodeKind::Frozen { spin, .. } => format!("label=\"{name} = {}\", shape=box", spin_label(*spin)),
                NodeKind::Coupled { .. } => format!("label=\"{name}\", shape=diamond"),
                NodeKind::Boundary => format!("label=\"{name}\", style=dotted"),
            };
            let _ = writeln!(out, "  n{id} [{attrs}];");
        }
        for (id, node) in self.nodes.iter().enumerate() {
            for &c in &node.children {
                match self.nodes[c].edge_label {
                    Some(l) => {
                        let _ = writeln!(out, "  n{id} -> n{c} [label=\"{l}\"];");
                    }
                    None => {
                        let _ = writeln!(out, "  n{id} -> n{c};");
                    }
                }
            }
        }
        for l in &self.lines {
            let _ = writeln!(out, "  n{} -> n{} [style=dashed, constraint=false, arrowhead=none];", l.top, l.bottom);
        }
        out.push_str("}\n");
        out
    }
}

/// Build the CD tree of `model` (which must be a pairwise graph) rooted at
/// `root`, adapted to the model's boundary condition.
pub fn build_cd_tree(model: &Model, root: Vertex, reference: Spin, depth_limit: Option<usize>) -> Result<CdTree, ComputeError> {
    let graph = model.structure.as_graph().ok_or(ComputeError::NeedsGraph)?;
    if root >= graph.n() {
        return Err(ComputeError::VertexOutOfRange(root));
    }
    if reference >= model.q() {
        return Err(ComputeError::SpinOutOfRange(reference));
    }
    if model.boundary.is_frozen(root) {
        return Err(ComputeError::FrozenQueryVertex(root));
    }
    let mut builder = Builder {
        graph,
        boundary: &model.boundary,
        reference,
        depth_limit,
        nodes: Vec::new(),
        lines: Vec::new(),
        on_path: vec![None; graph.n()],
    };
    let root_kind = if depth_limit == Some(0) { NodeKind::Boundary } else { NodeKind::Internal };
    builder.nodes.push(TreeNode {
        vertex: Some(root),
        edge: None,
        edge_label: None,
        kind: root_kind.clone(),
        parent: None,
        children: Vec::new(),
        depth: 0,
    });
    if root_kind == NodeKind::Internal {
        builder.expand(CdTree::ROOT, root);
    }
    Ok(CdTree { nodes: builder.nodes, lines: builder.lines, reference })
}

#[derive(Clone)]
struct PathEntry {
    node: NodeId,
    /// Label of the edge the walk left this vertex by.
    departing_label: u32,
}

struct Builder<'a> {
    graph: &'a Graph,
    boundary: &'a BoundaryCondition,
    reference: Spin,
    depth_limit: Option<usize>,
    nodes: Vec<TreeNode>,
    lines: Vec<CouplingLine>,
    on_path: Vec<Option<PathEntry>>,
}

impl Builder<'_> {
    fn expand(&mut self, id: NodeId, vertex: Vertex) {
        let depth = self.nodes[id].depth;
        let entering = self.nodes[id].edge;
        self.on_path[vertex] = Some(PathEntry { node: id, departing_label: 0 });
        for &(next, edge) in self.graph.neighbors(vertex) {
            if Some(edge) == entering {
                continue;
            }
            let label = self.graph.label(edge);
            if let Some(entry) = self.on_path[vertex].as_mut() {
                entry.departing_label = label;
            }
            let kind = if let Some(spin) = self.boundary.get(next) {
                NodeKind::Frozen { spin, closes_at: None }
            } else if let Some(earlier) = &self.on_path[next] {
                if label > earlier.departing_label {
                    NodeKind::Frozen { spin: self.reference, closes_at: Some(earlier.node) }
                } else {
                    NodeKind::Coupled { top: earlier.node }
                }
            } else if self.depth_limit == Some(depth + 1) {
                NodeKind::Boundary
            } else {
                NodeKind::Internal
            };
            let child = self.nodes.len();
            if let NodeKind::Coupled { top } = kind {
                self.lines.push(CouplingLine { top, bottom: child });
            }
            self.nodes.push(TreeNode {
                vertex: Some(next),
                edge: Some(edge),
                edge_label: Some(label),
                kind: kind.clone(),
                parent: Some(id),
                children: Vec::new(),
                depth: depth + 1,
            });
            self.nodes[id].children.push(child);
            if kind == NodeKind::Internal {
                self.expand(child, next);
            }
        }
        self.on_path[vertex] = None;
    }
}

/// Why a set of coupling lines is not valid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CouplingViolation {
    UnknownNode(NodeId),
    /// The top is not a strict ancestor of the bottom.
    TopNotAncestor(CouplingLine),
    DuplicateBottom(CouplingLine, CouplingLine),
    /// One line's span contains the other's on a single path.
    Nested(CouplingLine, CouplingLine),
    /// Both lines lie on one path without one containing the other.
    Interleaved(CouplingLine, CouplingLine),
}

fn is_strict_ancestor(parents: &[Option<NodeId>], a: NodeId, b: NodeId) -> bool {
    let mut cur = parents[b];
    while let Some(c) = cur {
        if c == a {
            return true;
        }
        cur = parents[c];
    }
    false
}

fn depth_of(parents: &[Option<NodeId>], mut id: NodeId) -> usize {
    let mut d = 0;
    while let Some(p) = parents[id] {
        d += 1;
        id = p;
    }
    d
}

/// Check that every line joins a node to a strict descendant, that bottoms
/// are unique, and that no two lines have all four endpoints on one
/// root-to-leaf path.
pub fn validate_coupling_lines(parents: &[Option<NodeId>], lines: &[CouplingLine]) -> Result<(), CouplingViolation> {
    for l in lines {
        for id in [l.top, l.bottom] {
            if id >= parents.len() {
                return Err(CouplingViolation::UnknownNode(id));
            }
        }
        if !is_strict_ancestor(parents, l.top, l.bottom) {
            return Err(CouplingViolation::TopNotAncestor(*l));
        }
    }
    let on_path = |a: NodeId, b: NodeId| a == b || is_strict_ancestor(parents, a, b);
    for (i, a) in lines.iter().enumerate() {
        for b in &lines[i + 1..] {
            if a.bottom == b.bottom {
                return Err(CouplingViolation::DuplicateBottom(*a, *b));
            }
            // Tops are ancestors of their bottoms, so all four endpoints share
            // a path exactly when the bottoms are comparable.
            let (upper, lower) = if on_path(a.bottom, b.bottom) {
                (a, b)
            } else if on_path(b.bottom, a.bottom) {
                (b, a)
            } else {
                continue;
            };
            // `upper` ends above `lower`; nested when `upper` also starts
            // at or below `lower`'s top.
            let nested = depth_of(parents, upper.top) >= depth_of(parents, lower.top);
            return Err(if nested {
                CouplingViolation::Nested(*lower, *upper)
            } else {
                CouplingViolation::Interleaved(*a, *b)
            });
        }
    }
    Ok(())
}
