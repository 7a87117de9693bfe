pub mod engine;
pub mod ot;
pub mod gaussian;
pub mod seg;
pub mod metrics;
pub mod data;
pub mod model;
pub mod cli;
