//! Reverse-mode automatic differentiation over small dense `f64` arrays.

mod array;
mod check;
mod graph;

use std::collections::BTreeMap;

pub use array::DenseArray;
pub use check::{finite_diff_check, finite_diff_report, GradCheck};
pub use graph::{Gradients, Graph, NodeGrads, NodeId, EPS_NORM};

/// Named parameter arrays, ordered by name.
pub type ParamSet = BTreeMap<String, DenseArray>;
