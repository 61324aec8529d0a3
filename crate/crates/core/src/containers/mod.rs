//! Batched containers shared by samplers, losses and the trainer.

mod replay;
mod states;
mod trajectories;

pub use replay::ReplayBuffer;
pub use states::{ActionBatch, StateBatch};
pub use trajectories::{Trajectories, Trajectory, Transitions};
