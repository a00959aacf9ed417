//! Per-sample clipping, noisy lot aggregation, and the adaptive clipping
//! threshold.
//!
//! The threshold for round `t` is the noisy mean of the previous lot's
//! clipped per-sample norms scaled by the clip factor:
//!
//! ```text
//! C_t = factor * | (Σ_i min(‖g_{t-1}(x_i)‖, C_{t-1}) + N(0, (C_{t-1} σ_{t-1})²)) / L |
//! ```
//!
//! clamped below by a positive floor.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::smallmodel::{
    per_sample_gradients, Example, Model, ModelError, ParamShape, ParamVector,
};

/// Default lower bound on the adaptive threshold.
pub const DEFAULT_THRESHOLD_FLOOR: f64 = 1e-6;

/// Relative slack for the post-clip norm check; absorbs the rounding of the
/// rescale so that clipping is idempotent.
pub const CLIP_REL_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpError {
    #[error("clipping threshold must be positive and finite, got {0}")]
    InvalidThreshold(f64),
    #[error("noise scale must be nonnegative and finite, got {0}")]
    InvalidSigma(f64),
    #[error("lot size must be at least 1")]
    InvalidLotSize,
    #[error("invalid clip config: {0}")]
    InvalidConfig(&'static str),
    #[error("non-finite input")]
    NonFinite,
    #[error("input {index} has norm {norm} above the clipping threshold {threshold}")]
    ClipViolation {
        index: usize,
        norm: f64,
        threshold: f64,
    },
    #[error("gradient length {actual} does not match parameter shape length {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = DpError> = std::result::Result<T, E>;

/// Source of zero-mean Gaussian draws.
pub trait NoiseSource {
    /// One draw from `N(0, std_dev²)`.
    fn gaussian(&mut self, std_dev: f64) -> f64;
}

/// Seeded ChaCha8 stream owned by one client.
///
/// Zero standard deviation still consumes a draw, so the stream position does
/// not depend on the noise scale.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    rng: ChaCha8Rng,
}

impl GaussianSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` of the generator seeded with `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }
}

impl NoiseSource for GaussianSampler {
    fn gaussian(&mut self, std_dev: f64) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        std_dev * z
    }
}

impl RngCore for GaussianSampler {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Clip factor and floor for the adaptive threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub clip_factor: f64,
    pub floor: f64,
}

impl ClipConfig {
    pub fn new(clip_factor: f64, floor: f64) -> Result<Self> {
        if !(clip_factor > 0.0 && clip_factor.is_finite()) {
            return Err(DpError::InvalidConfig("clip_factor must be positive"));
        }
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(DpError::InvalidConfig("floor must be positive"));
        }
        Ok(Self { clip_factor, floor })
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            clip_factor: 1.0,
            floor: DEFAULT_THRESHOLD_FLOOR,
        }
    }
}

/// Current threshold and the noise scale of the round it was used in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipState {
    pub threshold: f64,
    pub previous_sigma: f64,
}

fn check_threshold(c: f64) -> Result<()> {
    if c > 0.0 && c.is_finite() {
        Ok(())
    } else {
        Err(DpError::InvalidThreshold(c))
    }
}

fn within_threshold(norm: f64, c: f64) -> bool {
    norm <= c * (1.0 + CLIP_REL_SLACK)
}

/// Scales `gradient` down to norm `c` if it is longer.
pub fn clip(gradient: &ParamVector, c: f64) -> Result<ParamVector> {
    let mut out = gradient.clone();
    clip_in_place(&mut out, c)?;
    Ok(out)
}

/// In-place [`clip`]; returns the norm before clipping.
pub fn clip_in_place(gradient: &mut ParamVector, c: f64) -> Result<f64> {
    check_threshold(c)?;
    let norm = gradient.norm_l2();
    if !norm.is_finite() {
        return Err(DpError::NonFinite);
    }
    if !within_threshold(norm, c) {
        gradient.scale(1.0 / (norm / c));
    }
    Ok(norm)
}

/// `(Σ clipped + N(0, σ²C²) per coordinate) / L`.
///
/// `lot_size` is the nominal `L`, not the realized count. An empty input
/// yields pure noise.
pub fn noisy_mean(
    clipped: &[ParamVector],
    shape: &Arc<ParamShape>,
    c: f64,
    sigma: f64,
    lot_size: usize,
    noise: &mut dyn NoiseSource,
) -> Result<ParamVector> {
    check_threshold(c)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DpError::InvalidSigma(sigma));
    }
    if lot_size == 0 {
        return Err(DpError::InvalidLotSize);
    }
    let mut sum = clipped_sum(clipped, shape, c)?;
    let std_dev = sigma * c;
    let l = lot_size as f64;
    for v in sum.values_mut() {
        *v = (*v + noise.gaussian(std_dev)) / l;
    }
    Ok(sum)
}

/// Pre-noise sum of clipped gradients; rejects any input longer than `c`.
pub fn clipped_sum(clipped: &[ParamVector], shape: &Arc<ParamShape>, c: f64) -> Result<ParamVector> {
    let mut sum = ParamVector::zeros(shape.clone());
    for (index, g) in clipped.iter().enumerate() {
        if g.len() != sum.len() {
            return Err(DpError::ShapeMismatch {
                expected: sum.len(),
                actual: g.len(),
            });
        }
        let norm = g.norm_l2();
        if !norm.is_finite() {
            return Err(DpError::NonFinite);
        }
        if !within_threshold(norm, c) {
            return Err(DpError::ClipViolation {
                index,
                norm,
                threshold: c,
            });
        }
        for (s, v) in sum.values_mut().iter_mut().zip(g.values()) {
            *s += v;
        }
    }
    Ok(sum)
}

/// Next adaptive threshold from the previous lot's raw per-sample norms.
///
/// The noise standard deviation is `state.threshold * sigma_prev`.
pub fn next_threshold(
    prev_norms: &[f64],
    state: &ClipState,
    cfg: &ClipConfig,
    sigma_prev: f64,
    lot_size: usize,
    noise: &mut dyn NoiseSource,
) -> Result<ClipState> {
    check_threshold(state.threshold)?;
    if !(sigma_prev >= 0.0 && sigma_prev.is_finite()) {
        return Err(DpError::InvalidSigma(sigma_prev));
    }
    if lot_size == 0 {
        return Err(DpError::InvalidLotSize);
    }
    if prev_norms.iter().any(|n| !n.is_finite() || *n < 0.0) {
        return Err(DpError::NonFinite);
    }
    let c_prev = state.threshold;
    let clipped: f64 = prev_norms.iter().map(|&n| n.min(c_prev)).sum();
    let noisy = (clipped + noise.gaussian(c_prev * sigma_prev)) / lot_size as f64;
    let threshold = (cfg.clip_factor * noisy.abs()).max(cfg.floor);
    Ok(ClipState {
        threshold,
        previous_sigma: sigma_prev,
    })
}

/// Initial threshold from one lot of synthetic inputs.
///
/// Features are standard normal and labels uniform, so no real data is
/// touched. The threshold is `factor * mean per-sample gradient norm`,
/// floored.
pub fn init_threshold(
    model: &dyn Model,
    params: &ParamVector,
    cfg: &ClipConfig,
    lot_size: usize,
    initial_sigma: f64,
    rng: &mut dyn RngCore,
) -> Result<ClipState> {
    if lot_size == 0 {
        return Err(DpError::InvalidLotSize);
    }
    let lot = synthetic_lot(model, lot_size, rng);
    let grads = per_sample_gradients(model, params, &lot)?;
    let mean = grads.gradients.iter().map(ParamVector::norm_l2).sum::<f64>() / lot_size as f64;
    Ok(ClipState {
        threshold: (cfg.clip_factor * mean).max(cfg.floor),
        previous_sigma: initial_sigma,
    })
}

/// Lot of `N(0, 1)` feature vectors with uniform labels; draws features
/// then the label for each example in turn.
pub fn synthetic_lot(model: &dyn Model, lot_size: usize, rng: &mut dyn RngCore) -> Vec<Example> {
    let dim = model.input_dim();
    let classes = model.num_classes();
    (0..lot_size)
        .map(|_| {
            let features = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let label = rng.random_range(0..classes);
            Example::new(features, label)
        })
        .collect()
}
