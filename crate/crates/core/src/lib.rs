pub mod analysis;
pub mod baselines;
pub mod cli;
pub mod geo;
pub mod model;
pub mod nn;
pub mod sim;
pub mod traj;
