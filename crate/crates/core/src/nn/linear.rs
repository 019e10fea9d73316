use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::{missing_cache, Param};
use crate::error::{Error, Result};

/// Fully-connected layer `y = x W + b`, `W` stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    cache: Vec<Array2<f64>>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Param::uniform(format!("{name}.weight"), vec![input, output], bound, rng),
            bias: Param::filled(format!("{name}.bias"), vec![output], 0.0),
            cache: Vec::new(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "{}: input has {} features, expected {}",
                self.weight.name,
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut y = x.dot(&self.weight.mat());
        y += &self.bias.vec();
        Ok(y)
    }

    pub fn forward_train(&mut self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let y = self.forward(x)?;
        self.cache.push(x.to_owned());
        Ok(y)
    }

    pub fn backward(&mut self, dy: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let x = self.cache.pop().ok_or_else(|| missing_cache(&self.weight.name))?;
        general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut self.weight.grad_mat_mut());
        self.bias.grad_vec_mut().scaled_add(1.0, &dy.sum_axis(Axis(0)));
        Ok(dy.dot(&self.weight.mat().t()))
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
