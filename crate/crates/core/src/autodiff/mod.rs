//! Dense reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod kernels;
mod lstm;
mod optim;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use graph::{one_hot_targets, Gradients, Graph, Var, NORM_FLOOR, PROB_FLOOR};
pub use lstm::{lstm_step, LstmVars};
pub use optim::{AdamConfig, OptimizerKind, OptimizerState, SgdConfig};
