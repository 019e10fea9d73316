use ndarray::{Array2, ArrayView2, Zip};

use super::missing_cache;
use crate::error::Result;

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Exponential linear unit with alpha = 1.
#[derive(Debug, Clone, Default)]
pub struct Elu {
    /// Cached outputs; the derivative for `x <= 0` is `y + 1`.
    cache: Vec<Array2<f64>>,
}

impl Elu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.mapv(elu)
    }

    pub fn forward_train(&mut self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let y = self.forward(x);
        self.cache.push(y.clone());
        y
    }

    pub fn backward(&mut self, dy: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let y = self.cache.pop().ok_or_else(|| missing_cache("elu"))?;
        let mut dx = dy.to_owned();
        Zip::from(&mut dx).and(&y).for_each(|d, &y| {
            if y <= 0.0 {
                *d *= y + 1.0;
            }
        });
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }
}
