//! Simulated reinforcement-learning tutor.
//!
//! A small pedagogical policy picks one of four support actions each time a
//! simulated student sends a message. The crate covers the whole loop:
//!
//! * [`simulator`] generates students and logs their episodes,
//! * [`online_ppo`] trains the policy online with clipped PPO,
//! * [`offline_rl`] distills logged data with behavior cloning or an
//!   importance-weighted policy gradient and selects a configuration by
//!   repeated 50/50 student splits scored with weighted importance sampling,
//! * [`explain`] attributes action probabilities to input features with
//!   integrated gradients.
//!
//! [`runtime`] ties these together behind the `rltutor` command line.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod domain;
pub mod error;
pub mod explain;
pub mod nnet;
pub mod offline_rl;
pub mod online_ppo;
pub mod policy;
pub mod reward;
pub mod runtime;
pub mod seed;
pub mod simulator;
pub mod svg;

pub use error::{Error, Result};
