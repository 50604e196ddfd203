//! Dimension-aware trust-region analysis and PPO for chain swimmers with a
//! variable number of joints.
//!
//! The crate has three layers:
//!
//! * analysis of how policy-update steps and clipping probabilities scale
//!   with action dimension ([`policy`], [`trust_region`]);
//! * a self-contained learning stack: reverse-mode autodiff, an
//!   edge-conditioned graph network that handles any joint count with one
//!   parameter set, and a PPO trainer with a sqrt(dim)-compensated clipping
//!   band ([`autodiff`], [`nn`], [`ppo`]);
//! * a planar swimmer environment whose action dimension is the joint count,
//!   used to exercise the theory end to end ([`env`]).
//!
//! The `examples/` directory is the front door: one runnable example per
//! capability. A thin `graph-ppo` binary exposes the same entry points as
//! subcommands ([`cli`]).

pub mod autodiff;
pub mod cli;
pub mod env;
pub mod error;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod trust_region;

pub use error::{Error, Result};
