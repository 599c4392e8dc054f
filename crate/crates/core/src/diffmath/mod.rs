//! Dense differentiable computation: parameter storage, a fixed-vocabulary
//! expression graph with exact reverse-mode gradients, a finite-difference
//! checker and Adam.

mod adam;
mod gradcheck;
mod graph;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, FlaggedEntry, GradCheckReport, SlotCheck};
pub use graph::{eval_with_grads, sigmoid, softmax, Grads, Graph, NodeId};
pub use params::{ParamStore, Slot, SlotId, SlotKind, PARAMS_HEADER, PARAMS_VERSION};
pub(crate) use params::format_f64;
