//! Offline traffic-signal-control toolkit.
//!
//! Reconstructs queue lengths and delays from coarse intersection detector
//! data (5-minute flows plus 5-second spatial counts) via a shockwave
//! queuing model fitted with Gaussian-process Metropolis-Hastings inference,
//! then trains a cycle-length/green-split policy with an in-sample offline
//! RL algorithm. A bundled deterministic intersection simulator generates
//! datasets and evaluates policies end to end.

pub mod config;
pub mod cycledecomp;
pub mod error;
pub mod gpmh;
pub mod nnet;
pub mod norm;
pub mod obs;
pub mod orl;
pub mod perf;
pub mod pipeline;
pub mod queuing;
pub mod simenv;
pub mod types;

pub use error::{Error, Result};
