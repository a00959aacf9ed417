//! Differentially private federated learning with adaptive per-client
//! clipping thresholds and validation-driven noise decay.
//!
//! Module map:
//! - [`accountant`]: RDP of the sampled Gaussian mechanism and its
//!   conversion to `(ε, δ)`.
//! - [`smallmodel`]: logistic regression and a one-hidden-layer MLP with
//!   exact per-sample gradients, plus SGD and Adam.
//! - [`dpcore`]: clipping and the noisy mean, with adaptive thresholds.
//! - [`scheduler`]: noise-scale decay on three consecutive validation-loss
//!   drops.
//! - [`federation`]: the round loop.
//! - [`datasets`]: IDX files and label-shard partitions.
//! - [`experiment`]: config handling and the run loop with its outputs.

pub mod accountant;
pub mod datasets;
pub mod dpcore;
pub mod experiment;
pub mod federation;
pub mod scheduler;
pub mod smallmodel;
