//! Reverse-mode differentiation, optimizers and learning-rate schedules.

mod graph;
mod optim;
mod schedule;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{OptimizerKind, OptimizerState};
pub use schedule::LrSchedule;
pub use tensor::Tensor;

pub(crate) use graph::{bce_term, log_sum_exp};
