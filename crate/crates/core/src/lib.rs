//! Complete neural-network verification by branch and bound over ReLU splits.
//!
//! The toolkit verifies properties of the form `f(x) >= 0` for all `x` in a
//! box domain. Sound output lower bounds come from the Planet relaxation's
//! Lagrangian decomposition (optimized by supergradient ascent or by a learned
//! bounding GNN); branching decisions come from hand-designed heuristics,
//! strong branching, or a learned branching GNN. Exact desk-scale oracles (a
//! dense LP solver and an activation-pattern enumerator) back every soundness
//! claim in the test suites.

pub mod bab;
pub mod boundgnn;
pub mod branchgnn;
pub mod datagen;
pub mod dual;
pub mod error;
pub mod gnn;
pub mod jsonfmt;
pub mod model;
pub mod oracle;
pub mod relax;

pub use error::{Error, Result};
