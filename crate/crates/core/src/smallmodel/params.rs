use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

/// Named block of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub dims: Vec<usize>,
}

impl LayerShape {
    pub fn new(name: impl Into<String>, dims: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            dims,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered layer layout of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    layers: Vec<LayerShape>,
}

impl ParamShape {
    pub fn new(layers: Vec<LayerShape>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.layers.iter().map(LayerShape::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Start offset of each layer in the flat vector.
    pub fn offsets(&self) -> Vec<usize> {
        self.layers
            .iter()
            .scan(0, |acc, l| {
                let start = *acc;
                *acc += l.len();
                Some(start)
            })
            .collect()
    }
}

/// Flat vector of model parameters or gradients with its layer layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    shape: Arc<ParamShape>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, shape: Arc<ParamShape>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(ModelError::DimensionMismatch {
                expected: shape.len(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Self { values, shape })
    }

    pub fn zeros(shape: Arc<ParamShape>) -> Self {
        Self {
            values: vec![0.0; shape.len()],
            shape,
        }
    }

    pub(crate) fn from_raw(values: Vec<f64>, shape: Arc<ParamShape>) -> Self {
        debug_assert_eq!(values.len(), shape.len());
        Self { values, shape }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn shape(&self) -> &Arc<ParamShape> {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm_l2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        self.check_same_len(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn check_same_len(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(ModelError::DimensionMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(())
    }

    /// Slice of one named layer.
    pub fn layer(&self, name: &str) -> Option<&[f64]> {
        let offsets = self.shape.offsets();
        self.shape
            .layers()
            .iter()
            .zip(offsets)
            .find(|(l, _)| l.name == name)
            .map(|(l, start)| &self.values[start..start + l.len()])
    }
}
