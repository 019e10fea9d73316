use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{missing_cache, Param};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics, frozen.
    Infer,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
    mode: BnMode,
}

/// Per-channel batch normalization over `[rows, channels]` input.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Vec<BnCache>,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], 1.0),
            beta: Param::filled(format!("{name}.beta"), vec![channels], 0.0),
            running_mean: Param::filled(format!("{name}.running_mean"), vec![channels], 0.0).buffer(),
            running_var: Param::filled(format!("{name}.running_var"), vec![channels], 1.0).buffer(),
            cache: Vec::new(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &ArrayView2<'_, f64>, mode: BnMode) -> Result<()> {
        if x.ncols() != self.channels() {
            return Err(Error::shape(format!(
                "{}: input has {} channels, expected {}",
                self.gamma.name,
                x.ncols(),
                self.channels()
            )));
        }
        if mode == BnMode::Train && x.nrows() < 2 {
            return Err(Error::invalid(format!(
                "{}: training mode needs a batch of at least 2, got {}",
                self.gamma.name,
                x.nrows()
            )));
        }
        Ok(())
    }

    fn normalize(&self, x: &ArrayView2<'_, f64>, mean: &Array1<f64>, inv_std: &Array1<f64>) -> (Array2<f64>, Array2<f64>) {
        let x_hat = (x - mean) * inv_std;
        let y = &x_hat * &self.gamma.vec() + &self.beta.vec();
        (x_hat, y)
    }

    fn running_inv_std(&self) -> Array1<f64> {
        self.running_var.vec().mapv(|v| 1.0 / (v + BN_EPS).sqrt())
    }

    /// Inference path using running statistics.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(&x, BnMode::Infer)?;
        let mean = self.running_mean.vec().to_owned();
        Ok(self.normalize(&x, &mean, &self.running_inv_std()).1)
    }

    pub fn forward_train(&mut self, x: ArrayView2<'_, f64>, mode: BnMode) -> Result<Array2<f64>> {
        self.check(&x, mode)?;
        let (mean, inv_std) = match mode {
            BnMode::Train => {
                let n = x.nrows() as f64;
                let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                let var = x.var_axis(Axis(0), 0.0);
                let unbiased = n / (n - 1.0);
                for (r, m) in self.running_mean.value.iter_mut().zip(&mean) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                }
                for (r, v) in self.running_var.value.iter_mut().zip(&var) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbiased;
                }
                (mean, var.mapv(|v| 1.0 / (v + BN_EPS).sqrt()))
            }
            BnMode::Infer => (self.running_mean.vec().to_owned(), self.running_inv_std()),
        };
        let (x_hat, y) = self.normalize(&x, &mean, &inv_std);
        self.cache.push(BnCache { x_hat, inv_std, mode });
        Ok(y)
    }

    pub fn backward(&mut self, dy: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let BnCache { x_hat, inv_std, mode } = self.cache.pop().ok_or_else(|| missing_cache(&self.gamma.name))?;
        let dgamma = (&dy * &x_hat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));
        let scale = &inv_std * &self.gamma.vec();
        let dx = match mode {
            BnMode::Infer => &dy * &scale,
            BnMode::Train => {
                let n = dy.nrows() as f64;
                // dx = gamma * inv_std / n * (n dy - sum(dy) - x_hat * sum(dy x_hat))
                let centered = (&dy * n - &dbeta) - &x_hat * &dgamma;
                centered * &(scale / n)
            }
        };
        self.gamma.grad_vec_mut().scaled_add(1.0, &dgamma);
        self.beta.grad_vec_mut().scaled_add(1.0, &dbeta);
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }
}
