//! Shared learnable-function machinery for the two GNNs: a reverse-mode
//! tape over dense matrices, MLP layers, an Adam optimizer, and parameter
//! (de)serialization.
//!
//! The GNNs are small and fixed-topology, so the tape supports exactly the
//! operator set they need (matmul, broadcast add, ReLU, row scaling, concat,
//! gather, plus the hinge-rank loss) instead of a general autodiff graph.

pub mod adam;
pub mod mlp;
pub mod params;
pub mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use mlp::{mlp_forward, mlp_forward_plain, Mlp};
pub use params::{load_params, save_params, ArchitectureMeta, ParamSet, Tensor};
pub use tape::{Gradients, Tape, Var};
