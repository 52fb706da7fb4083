//! Teacher-student self-supervised clustering with explicit, online cluster
//! balancing, at desk scale on synthetic vector data.

pub mod balancer;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod runner;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
