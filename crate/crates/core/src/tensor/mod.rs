//! Minimal reverse-mode automatic differentiation over dense row-major
//! matrices, sized for the small sequence models in this crate.
//!
//! Variable-length sequences are *packed*: a batch is one tall matrix whose
//! rows are the concatenated positions of every sample, and attention is
//! computed per segment. Row-wise layers therefore run as single large
//! matrix products with no padding. Everything is single-threaded and
//! evaluated in a fixed order, so results are bit-reproducible.

mod graph;
mod mat;
mod optim;
mod params;

pub use graph::{AttnPlan, AttnSegment, Graph, Var};
pub use mat::{Mat, Real};
pub use optim::{clip_grad_norm, Adam, AdamConfig, Grads};
pub use params::{ParamId, ParamStore};
