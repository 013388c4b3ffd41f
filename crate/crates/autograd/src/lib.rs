//! Reverse-mode automatic differentiation over dense 2-D `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s on a tape and
//! replays the tape backwards in [`Graph::backward`]. Trainable weights live in
//! a [`ParamStore`]; the graph borrows them instead of copying, so building a
//! graph over a large model costs only the activations.
//!
//! Sequences are laid out frames-by-channels (`[L × C]`): row `i` is frame `i`.

mod conv;
mod ctc;
pub mod gradcheck;
mod graph;
mod params;

pub use ctc::{ctc_forward_backward, CtcError};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};

/// Dense row-major matrix used for every value on the tape.
pub type Mat = ndarray::Array2<f64>;
