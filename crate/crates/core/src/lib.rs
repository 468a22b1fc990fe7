//! Toolkit for circuits of bounded treewidth.
//!
//! The crate provides a small circuit IR together with the transformations
//! needed to flatten a bounded-treewidth arithmetic circuit into an
//! equivalent formula, simulate it by a circuit of bounded width, and decide
//! digraph reachability through a width-bounded evaluator. A sparse
//! polynomial oracle backs all equivalence checking in tests.

pub mod bits;
pub mod circuit;
pub mod field;
pub mod gen;
pub mod poly;
pub mod reach;
pub mod td;
pub mod term;
pub mod traceback;
pub mod transforms;
pub mod width_sim;

pub use circuit::{Circuit, CircuitKind, Formula, Gate, GateId, Label};
pub use field::FieldSpec;
pub use poly::{Monomial, SparsePolynomial};
pub use td::{Graph, TreeDecomposition};
