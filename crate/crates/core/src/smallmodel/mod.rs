//! Small differentiable classifiers with exact per-sample gradients.
//!
//! Both models use softmax cross-entropy. Gradients are analytic, one per
//! example, and never averaged inside the model.

mod models;
mod optim;
mod params;

use std::borrow::Borrow;
use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use models::{LogisticRegression, Mlp};
pub use optim::{apply_update, OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{LayerShape, ParamShape, ParamVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value in parameters or activations")]
    NonFinite,
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// One labelled input; features are expected in `[0, 1]` for image data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

pub trait Model: Send + Sync + fmt::Debug {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn shape(&self) -> Arc<ParamShape>;
    fn init_params(&self, rng: &mut dyn RngCore) -> ParamVector;
    fn logits(&self, params: &ParamVector, features: &[f64]) -> Result<Vec<f64>>;
    /// Gradient of the cross-entropy of `example` alone, and that loss.
    fn example_gradient(&self, params: &ParamVector, example: &Example) -> Result<(ParamVector, f64)>;

    fn loss(&self, params: &ParamVector, example: &Example) -> Result<f64> {
        let logits = self.logits(params, &example.features)?;
        softmax_xent(&logits, example.label).map(|(_, l)| l)
    }
}

/// Which model to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Mlp { hidden: usize },
}

impl ModelKind {
    pub fn build(self, input_dim: usize, classes: usize) -> Arc<dyn Model> {
        match self {
            ModelKind::Logistic => Arc::new(LogisticRegression::new(input_dim, classes)),
            ModelKind::Mlp { hidden } => Arc::new(Mlp::new(input_dim, hidden, classes)),
        }
    }
}

/// Per-example gradients and losses, in batch order.
#[derive(Debug, Clone)]
pub struct PerSampleGradients {
    pub gradients: Vec<ParamVector>,
    pub losses: Vec<f64>,
}

pub fn per_sample_gradients<E>(
    model: &dyn Model,
    params: &ParamVector,
    batch: &[E],
) -> Result<PerSampleGradients>
where
    E: Borrow<Example> + Sync,
{
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let results: Vec<(ParamVector, f64)> = batch
        .par_iter()
        .map(|e| model.example_gradient(params, e.borrow()))
        .collect::<Result<_>>()?;
    let (gradients, losses) = results.into_iter().unzip();
    Ok(PerSampleGradients { gradients, losses })
}

/// Mean cross-entropy and top-1 accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Argmax ties resolve to the lowest class id.
pub fn evaluate<E>(model: &dyn Model, params: &ParamVector, examples: &[E]) -> Result<Evaluation>
where
    E: Borrow<Example> + Sync,
{
    if examples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let per: Vec<(f64, bool)> = examples
        .par_iter()
        .map(|e| {
            let e = e.borrow();
            let logits = model.logits(params, &e.features)?;
            let (_, loss) = softmax_xent(&logits, e.label)?;
            Ok((loss, argmax(&logits) == e.label))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let correct = per.iter().filter(|p| p.1).count() as f64;
    Ok(Evaluation {
        loss,
        accuracy: correct / n,
    })
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Returns `(softmax(logits) - onehot(label), -log softmax(logits)[label])`.
pub(crate) fn softmax_xent(logits: &[f64], label: usize) -> Result<(Vec<f64>, f64)> {
    if label >= logits.len() {
        return Err(ModelError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(ModelError::NonFinite);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let lse = max + total.ln();
    let mut delta: Vec<f64> = exps.iter().map(|&e| e / total).collect();
    delta[label] -= 1.0;
    Ok((delta, lse - logits[label]))
}

pub(crate) fn check_features(expected: usize, features: &[f64]) -> Result<()> {
    if features.len() != expected {
        return Err(ModelError::DimensionMismatch {
            expected,
            actual: features.len(),
        });
    }
    Ok(())
}
