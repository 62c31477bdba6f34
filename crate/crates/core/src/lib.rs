//! Wideband mmWave massive-MIMO channel estimation in the angular-delay
//! domain with sparse Bayesian learning, its AMP variant and learned
//! (unfolded) M-steps.

pub mod channel;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dictionaries;
pub mod error;
pub mod eval;
pub mod learned;
pub mod linalg;
pub mod measurement;
pub mod rng;
pub mod sbl;
pub mod selftest;
pub mod system;
pub mod training;

mod binio;

pub use config::{default_config, desk_config, SystemConfig};
pub use error::{Error, Result};
pub use system::System;
