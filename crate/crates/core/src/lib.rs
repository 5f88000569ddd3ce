//! Exact and depth-truncated marginals of multi-spin systems on graphs and
//! hypergraphs, computed on correlation-decay (CD) trees: trees of
//! self-avoiding walks whose cycle-closing leaves are either frozen to the
//! reference spin or coupled to an ancestor.

pub mod dist;
pub mod error;
pub mod eval;
pub mod model;
pub mod num;
pub mod mixing;
pub mod oracle;
pub mod partition;
pub mod recursion;
pub mod tree;

pub use dist::{normalize, MarginalDistribution, RatioVector};
pub use error::{ComputeError, ModelError};
pub use model::{BoundaryCondition, Graph, Hypergraph, Matrix, Model, SpinSystem, Structure, Tensor};
pub use num::{LogWeight, Rational, Scalar};
pub use tree::{build_cd_tree, CdTree, CouplingLine, NodeKind};
pub use eval::{cdtree_marginal, eval_ratios, BoundaryInitialization, Strategy};
pub use recursion::{hyper_marginal, hyper_ratio, ratio_by_recursion, split_marginal};
pub use partition::{engine_marginal, partition_telescoping, Engine};
