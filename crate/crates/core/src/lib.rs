//! Mixed expressway/arterial traffic network: multi-class cell transmission on
//! the expressways, macroscopic fundamental diagram subregions, logit route
//! choice with guidance compliance, and model predictive control solved by
//! particle swarm optimization.

#![allow(clippy::needless_range_loop)]

pub mod ctm;
pub mod demand;
pub mod error;
pub mod experiment;
pub mod mfd;
pub mod mpc;
pub mod network;
pub mod pso;
pub mod routes;
pub mod scenario;
pub mod units;

pub use error::{ModelError, ScenarioError};
