//! Simulation and inference for the sparse multi-layer contextual
//! stochastic block model: m constant-degree SBM layers on shared labels
//! plus an n x p Gaussian covariate matrix.
//!
//! The crate samples the generative model, computes factor-graph cycle
//! statistics with their limiting moments, runs detection tests, performs
//! weak recovery via self-avoiding walks and via linearized belief
//! propagation, and drives the Monte Carlo power and overlap experiments.

pub mod bp;
pub mod cycle_stats;
pub mod factor_graph;
pub mod harness;
pub mod model;
pub mod oracles;
pub mod rng;
pub mod saw_recovery;
pub mod storage;

pub use factor_graph::{Caps, WedgeComposition};
pub use model::{CommunityAssignment, Dataset, ModelParams};
