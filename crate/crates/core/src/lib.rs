//! Rectified-flow training with annealing reflow and flow-guided
//! distillation, on toy distributions that have analytic answers.

pub mod config;
pub mod data;
pub mod field;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod solvers;
pub mod tensor;
