//! Reparameterization proximal policy optimization on differentiable
//! simulators, with short-horizon backpropagation and clipped-surrogate
//! baselines.

pub mod algo;
pub mod diagnostics;
pub mod oracle;
pub mod envs;
pub mod experiment;
pub mod graph;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod value;
