//! Context-enriched port-Hamiltonian navigation fields with a route-aware
//! risk gate, tail-risk (CVaR) training, ablation variants and evaluation.

pub mod ablations;
pub mod config;
pub mod energy;
pub mod evalsuite;
pub mod export;
pub mod gate;
pub mod learner;
pub mod objective;
pub mod rollout;
pub mod world;

/// Planar vector used throughout.
pub type Vec2 = nalgebra::Vector2<f64>;
