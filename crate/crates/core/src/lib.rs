//! Multi-group self-paced relevance learning for grouped cross-modal
//! triplet ranking.

pub mod domain;
pub mod encoders;
pub mod error;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod relevance;
pub mod rng;
pub mod scheduler;
pub mod trainer;
pub mod world;

pub use error::{MsrlError, Result};
