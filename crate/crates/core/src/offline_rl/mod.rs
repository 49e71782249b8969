//! Offline policy learning from logged trajectories: behavior cloning,
//! POIS with an effective-sample-size bonus, WIS evaluation, and the
//! split-based grid selection harness.

mod grid;
mod train;
mod wis;

pub use grid::*;
pub use train::*;
pub use wis::*;
