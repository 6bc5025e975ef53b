//! Desk-scale stochastic world forecasting: a frozen-encoder feature world,
//! channel-compressed latents, and rectified-flow forecasting with a
//! deterministic regression baseline, probing decoders, and evaluation tools.

pub mod checkpoint;
pub mod compression;
pub mod config;
pub mod evaluation;
pub mod forecaster;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod probes;
pub mod seeding;
pub mod spectral;
pub mod world;
