//! Student and teacher networks, EMA coupling, schedules and the optimizer.

mod network;
mod schedule;
mod sgd;

pub use network::{Linear, Mlp, ModelConfig, ModelPair, Network, ParamGroup, StudentPass};
pub use schedule::{cosine, Schedule, ScheduleValues};
pub use sgd::Sgd;
