//! Movable-antenna secure link simulation, per-slot antenna position
//! optimisation, and forecasting of future antenna layouts.

pub mod channel;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod nn;
pub mod models;
pub mod pso;
pub mod rng;
pub mod scenario;
