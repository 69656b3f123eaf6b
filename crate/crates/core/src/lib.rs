//! Cloud-edge routing laboratory.
//!
//! A deterministic testbed for score-threshold routing between an edge agent
//! and a cloud oracle under time-varying network conditions. The crate has
//! three layers:
//!
//! - an analytic layer ([`econ`], [`theory`]) that computes quality-cost
//!   frontiers, optimal fallback thresholds, and their comparative statics
//!   with quadrature and root finding;
//! - a synthetic tool-calling world ([`world`]) with a parametric edge
//!   policy, a near-oracle cloud, a schema validator, and a frozen evaluator;
//! - an online layer ([`controllers`], [`learning`], [`sim`]) that routes
//!   step-by-step over network traces ([`net`]) and improves the edge policy
//!   with clipped PPO, SFT anchoring, and reward-model refresh.
//!
//! All randomness flows through caller-provided ChaCha streams, so every run
//! is reproducible from a seed.

pub mod controllers;
pub mod econ;
pub mod error;
pub mod format;
pub mod learning;
pub mod net;
pub mod quad;
pub mod sim;
pub mod theory;
pub mod world;

pub use error::{Error, Result};
