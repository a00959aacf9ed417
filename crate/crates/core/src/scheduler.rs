//! Validation-loss driven noise-scale decay.
//!
//! The history starts with three `+∞` sentinels. After each new validation
//! loss, if the last four recorded losses are strictly decreasing the noise
//! scale is multiplied by `beta`. Windows overlap; nothing resets after a
//! decay. Comparisons are literal, so `(∞, a, b, c)` with `a > b > c` already
//! decays on the third finite loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of trailing losses inspected per decision.
pub const WINDOW: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedulerError {
    #[error("validation loss must be finite, got {0}")]
    NonFiniteLoss(f64),
    #[error("initial sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("beta must lie in (0, 1), got {0}")]
    InvalidBeta(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaState {
    initial: f64,
    sigma: f64,
    beta: f64,
    loss_history: Vec<f64>,
    decay_count: u64,
}

impl SigmaState {
    pub fn new(initial: f64, beta: f64) -> Result<Self, SchedulerError> {
        if !(initial > 0.0 && initial.is_finite()) {
            return Err(SchedulerError::InvalidSigma(initial));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(SchedulerError::InvalidBeta(beta));
        }
        Ok(Self {
            initial,
            sigma: initial,
            beta,
            loss_history: vec![f64::INFINITY; WINDOW - 1],
            decay_count: 0,
        })
    }

    /// Records a validation loss; returns whether sigma decayed.
    pub fn observe_loss(&mut self, loss: f64) -> Result<bool, SchedulerError> {
        if !loss.is_finite() {
            return Err(SchedulerError::NonFiniteLoss(loss));
        }
        self.loss_history.push(loss);
        let tail = &self.loss_history[self.loss_history.len() - WINDOW..];
        let decay = tail.windows(2).all(|w| w[0] > w[1]);
        if decay {
            self.sigma *= self.beta;
            self.decay_count += 1;
        }
        Ok(decay)
    }

    pub fn current_sigma(&self) -> f64 {
        self.sigma
    }

    pub fn initial_sigma(&self) -> f64 {
        self.initial
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn decay_count(&self) -> u64 {
        self.decay_count
    }

    /// Full history including the leading sentinels.
    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    /// `initial · beta^decay_count`, accumulated by repeated multiplication in
    /// the same order as [`SigmaState::observe_loss`].
    pub fn expected_sigma(&self) -> f64 {
        (0..self.decay_count).fold(self.initial, |s, _| s * self.beta)
    }
}
