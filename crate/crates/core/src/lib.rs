//! Two-timescale stochastic dispatch for radial distribution feeders.

pub mod feeder;
pub mod scenario;
pub mod subproblem;
pub mod dispatch;
pub mod evaluate;
