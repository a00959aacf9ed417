use std::sync::Arc;

use rand::{Rng, RngCore};

use super::params::{LayerShape, ParamShape, ParamVector};
use super::{check_features, softmax_xent, Example, Model, ModelError, Result};

/// Multinomial logistic regression: `logits = W x + b`.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    input_dim: usize,
    classes: usize,
    shape: Arc<ParamShape>,
}

impl LogisticRegression {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        let shape = Arc::new(ParamShape::new(vec![
            LayerShape::new("weight", vec![classes, input_dim]),
            LayerShape::new("bias", vec![classes]),
        ]));
        Self {
            input_dim,
            classes,
            shape,
        }
    }
}

impl Model for LogisticRegression {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn shape(&self) -> Arc<ParamShape> {
        self.shape.clone()
    }

    /// All-zero start, the usual choice for a convex model.
    fn init_params(&self, _rng: &mut dyn RngCore) -> ParamVector {
        ParamVector::zeros(self.shape.clone())
    }

    fn logits(&self, params: &ParamVector, features: &[f64]) -> Result<Vec<f64>> {
        check_features(self.input_dim, features)?;
        check_params(&self.shape, params)?;
        let (w, b) = params.values().split_at(self.classes * self.input_dim);
        Ok(affine(w, b, features))
    }

    fn example_gradient(&self, params: &ParamVector, example: &Example) -> Result<(ParamVector, f64)> {
        let logits = self.logits(params, &example.features)?;
        let (delta, loss) = softmax_xent(&logits, example.label)?;
        let d = self.input_dim;
        let mut grad = vec![0.0; self.shape.len()];
        let (gw, gb) = grad.split_at_mut(self.classes * d);
        for (j, &dj) in delta.iter().enumerate() {
            for (g, &x) in gw[j * d..(j + 1) * d].iter_mut().zip(&example.features) {
                *g = dj * x;
            }
            gb[j] = dj;
        }
        Ok((ParamVector::from_raw(grad, self.shape.clone()), loss))
    }
}

/// One hidden ReLU layer followed by a linear softmax head.
#[derive(Debug, Clone)]
pub struct Mlp {
    input_dim: usize,
    hidden: usize,
    classes: usize,
    shape: Arc<ParamShape>,
}

impl Mlp {
    pub const DEFAULT_HIDDEN: usize = 32;

    pub fn new(input_dim: usize, hidden: usize, classes: usize) -> Self {
        let shape = Arc::new(ParamShape::new(vec![
            LayerShape::new("hidden.weight", vec![hidden, input_dim]),
            LayerShape::new("hidden.bias", vec![hidden]),
            LayerShape::new("output.weight", vec![classes, hidden]),
            LayerShape::new("output.bias", vec![classes]),
        ]));
        Self {
            input_dim,
            hidden,
            classes,
            shape,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn split<'a>(&self, v: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let (w1, rest) = v.split_at(self.hidden * self.input_dim);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.classes * self.hidden);
        (w1, b1, w2, b2)
    }

    /// Hidden pre-activations for `features`.
    pub fn pre_activations(&self, params: &ParamVector, features: &[f64]) -> Result<Vec<f64>> {
        check_features(self.input_dim, features)?;
        check_params(&self.shape, params)?;
        let (w1, b1, _, _) = self.split(params.values());
        Ok(affine(w1, b1, features))
    }
}

impl Model for Mlp {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn shape(&self) -> Arc<ParamShape> {
        self.shape.clone()
    }

    /// Uniform `±1/sqrt(fan_in)` for every weight and bias.
    fn init_params(&self, rng: &mut dyn RngCore) -> ParamVector {
        let mut values = Vec::with_capacity(self.shape.len());
        for (fan_in, count) in [
            (self.input_dim, self.hidden * self.input_dim),
            (self.input_dim, self.hidden),
            (self.hidden, self.classes * self.hidden),
            (self.hidden, self.classes),
        ] {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            values.extend((0..count).map(|_| rng.random_range(-bound..bound)));
        }
        ParamVector::from_raw(values, self.shape.clone())
    }

    fn logits(&self, params: &ParamVector, features: &[f64]) -> Result<Vec<f64>> {
        let z1 = self.pre_activations(params, features)?;
        let h: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();
        let (_, _, w2, b2) = self.split(params.values());
        Ok(affine(w2, b2, &h))
    }

    fn example_gradient(&self, params: &ParamVector, example: &Example) -> Result<(ParamVector, f64)> {
        let x = &example.features;
        let z1 = self.pre_activations(params, x)?;
        let h: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();
        let (_, _, w2, b2) = self.split(params.values());
        let logits = affine(w2, b2, &h);
        let (delta2, loss) = softmax_xent(&logits, example.label)?;

        let (d, hd, c) = (self.input_dim, self.hidden, self.classes);
        let mut grad = vec![0.0; self.shape.len()];
        let (gw1, rest) = grad.split_at_mut(hd * d);
        let (gb1, rest) = rest.split_at_mut(hd);
        let (gw2, gb2) = rest.split_at_mut(c * hd);

        let mut dh = vec![0.0; hd];
        for j in 0..c {
            let dj = delta2[j];
            let row = &w2[j * hd..(j + 1) * hd];
            for i in 0..hd {
                gw2[j * hd + i] = dj * h[i];
                dh[i] += row[i] * dj;
            }
            gb2[j] = dj;
        }
        for i in 0..hd {
            let di = if z1[i] > 0.0 { dh[i] } else { 0.0 };
            for (g, &xv) in gw1[i * d..(i + 1) * d].iter_mut().zip(x) {
                *g = di * xv;
            }
            gb1[i] = di;
        }
        Ok((ParamVector::from_raw(grad, self.shape.clone()), loss))
    }
}

/// Row-major `W x + b`.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    b.iter()
        .enumerate()
        .map(|(j, &bj)| {
            bj + w[j * d..(j + 1) * d]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .collect()
}

fn check_params(shape: &ParamShape, params: &ParamVector) -> Result<()> {
    if params.len() != shape.len() {
        return Err(ModelError::DimensionMismatch {
            expected: shape.len(),
            actual: params.len(),
        });
    }
    Ok(())
}
