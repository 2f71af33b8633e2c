//! Optimizer plus schedule bookkeeping shared by every training loop.

use crate::diffcore::{LrSchedule, OptimizerKind, OptimizerState, Tensor};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Trainer {
    optimizer: OptimizerState,
    schedule: LrSchedule,
}

impl Trainer {
    pub fn new(kind: OptimizerKind, schedule: LrSchedule, params: &[Tensor]) -> Self {
        Trainer {
            optimizer: OptimizerState::new(kind, params),
            schedule,
        }
    }

    /// Applies one update at the scheduled rate and returns that rate.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<f64> {
        let lr = self.schedule.lr(self.optimizer.step_count());
        self.optimizer.step(params, grads, lr)?;
        Ok(lr)
    }
}
