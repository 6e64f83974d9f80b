//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as it runs; [`Graph::backward`] walks
//! the record in reverse append order and returns [`Gradients`] for every node
//! reachable from a scalar loss. Trainable tensors live in a [`ParamStore`]
//! outside the graph, so a fresh graph is built for each optimizer step.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{check_parameter_gradients, finite_difference_gradient, relative_error, GroupError, DEFAULT_STEP};
pub use graph::{Axis, Gradients, Graph, NodeId, OpKind};
pub use params::{ParamId, ParamStore};
