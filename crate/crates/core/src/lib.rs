//! Desk-scale unified understanding-and-generation driving stack.
//!
//! The crate is organized around a self-contained 2D driving microworld and a
//! small neural stack trained on it with a three-stage curriculum:
//!
//! - [`microworld`]: road network, ego kinematics, scripted agents, traffic
//!   lights, multi-view rasterized cameras, expert demonstrations, infractions.
//! - [`nn`]: f64 tape-based autodiff substrate (tensors, layers, AdamW).
//! - [`vision`]: multi-view encoder, BEV query decoder, perception heads.
//! - [`lm`]: instruction tokenizer, Q-Former frame compression, causal
//!   transformer planner with action and world queries.
//! - [`control`]: waypoint-to-control conversion via two PID controllers.
//! - [`generator`]: multi-view conditional denoising-diffusion video model.
//! - [`training`]: dataset collection, three training stages, checkpoints.
//! - [`eval`]: closed-loop benchmark (RC/IS/DS), Fréchet feature distances,
//!   long-horizon study, ablation arms.

pub mod config;
pub mod control;
pub mod eval;
pub mod generator;
pub mod lm;
pub mod microworld;
pub mod nn;
pub mod rng;
pub mod training;
pub mod util;
pub mod vision;

pub use config::RunConfig;
