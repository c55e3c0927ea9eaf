//! Individualized decision rules that maximize the conditional value-at-risk
//! of the outcome under a randomized trial.

pub mod alternate;
pub mod criteria;
pub mod data;
pub mod dca;
pub mod model;
pub mod pls;
pub mod runner;
pub mod simlab;
pub mod surrogate;
pub mod tuning;
