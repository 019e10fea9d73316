use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView4, Axis};
use rand::Rng;

use super::{missing_cache, Param};
use crate::error::{Error, Result};

/// Valid (unpadded) 2-d cross-correlation, stride 1.
///
/// Activations are channels-last `[batch, width, height, channels]`; the
/// kernel is stored `[kw, kh, c_in, c_out]` so that it reshapes directly into
/// the im2col weight matrix.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: Param,
    pub bias: Option<Param>,
    kw: usize,
    kh: usize,
    c_in: usize,
    c_out: usize,
    cache: Vec<Array4<f64>>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        (kw, kh): (usize, usize),
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((kw * kh * c_in) as f64).sqrt();
        Self {
            kernel: Param::uniform(format!("{name}.kernel"), vec![kw, kh, c_in, c_out], bound, rng),
            bias: with_bias.then(|| Param::filled(format!("{name}.bias"), vec![c_out], 0.0)),
            kw,
            kh,
            c_in,
            c_out,
            cache: Vec::new(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }

    /// Output spatial size for a `(w, h)` input.
    pub fn output_size(&self, (w, h): (usize, usize)) -> Result<(usize, usize)> {
        if w < self.kw || h < self.kh {
            return Err(Error::shape(format!(
                "{}: kernel {}x{} does not fit input {w}x{h}",
                self.kernel.name, self.kw, self.kh
            )));
        }
        Ok((w - self.kw + 1, h - self.kh + 1))
    }

    fn check(&self, x: &ArrayView4<'_, f64>) -> Result<(usize, usize)> {
        let (_, w, h, c) = x.dim();
        if c != self.c_in {
            return Err(Error::shape(format!(
                "{}: input has {c} channels, expected {}",
                self.kernel.name, self.c_in
            )));
        }
        self.output_size((w, h))
    }

    /// `[batch * w' * h', kw * kh * c_in]` patch matrix.
    fn im2col(&self, x: &ArrayView4<'_, f64>, (ow, oh): (usize, usize)) -> Array2<f64> {
        let (b, _, _, c) = x.dim();
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let (w, h) = (x.dim().1, x.dim().2);
        let k = self.kw * self.kh * c;
        let mut cols = vec![0.0; b * ow * oh * k];
        let mut dst = 0;
        for bi in 0..b {
            for i in 0..ow {
                for j in 0..oh {
                    for di in 0..self.kw {
                        for dj in 0..self.kh {
                            let at = ((bi * w + i + di) * h + j + dj) * c;
                            cols[dst..dst + c].copy_from_slice(&src[at..at + c]);
                            dst += c;
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((b * ow * oh, k), cols).expect("im2col shape")
    }

    fn col2im(&self, dcols: &Array2<f64>, (b, w, h): (usize, usize, usize), (ow, oh): (usize, usize)) -> Array4<f64> {
        let c = self.c_in;
        let mut dx = vec![0.0; b * w * h * c];
        let dcols = dcols.as_standard_layout();
        let src = dcols.as_slice().expect("standard layout");
        let mut at = 0;
        for bi in 0..b {
            for i in 0..ow {
                for j in 0..oh {
                    for di in 0..self.kw {
                        for dj in 0..self.kh {
                            let base = ((bi * w + i + di) * h + j + dj) * c;
                            for (d, s) in dx[base..base + c].iter_mut().zip(&src[at..at + c]) {
                                *d += s;
                            }
                            at += c;
                        }
                    }
                }
            }
        }
        Array4::from_shape_vec((b, w, h, c), dx).expect("col2im shape")
    }

    fn weight_mat(&self) -> ndarray::ArrayView2<'_, f64> {
        self.kernel.mat()
    }

    pub fn forward(&self, x: ArrayView4<'_, f64>) -> Result<Array4<f64>> {
        let (ow, oh) = self.check(&x)?;
        let b = x.dim().0;
        let cols = self.im2col(&x, (ow, oh));
        let mut y = cols.dot(&self.weight_mat());
        if let Some(bias) = &self.bias {
            y += &bias.vec();
        }
        Ok(y.into_shape_with_order((b, ow, oh, self.c_out)).expect("conv output shape"))
    }

    pub fn forward_train(&mut self, x: ArrayView4<'_, f64>) -> Result<Array4<f64>> {
        let y = self.forward(x)?;
        self.cache.push(x.to_owned());
        Ok(y)
    }

    /// Accumulates kernel/bias gradients and returns the input gradient.
    pub fn backward(&mut self, dy: ArrayView4<'_, f64>) -> Result<Array4<f64>> {
        let x = self.cache.pop().ok_or_else(|| missing_cache(&self.kernel.name))?;
        let (b, w, h, _) = x.dim();
        let (ow, oh) = self.output_size((w, h))?;
        let dy = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * ow * oh, self.c_out))
            .map_err(|e| Error::shape(e.to_string()))?;
        // patches are recomputed rather than cached to bound memory over long unrolls
        let cols = self.im2col(&x.view(), (ow, oh));
        general_mat_mul(1.0, &cols.t(), &dy, 1.0, &mut self.kernel.grad_mat_mut());
        if let Some(bias) = &mut self.bias {
            bias.grad_vec_mut().scaled_add(1.0, &dy.sum_axis(Axis(0)));
        }
        let dcols = dy.dot(&self.weight_mat().t());
        Ok(self.col2im(&dcols, (b, w, h), (ow, oh)))
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.kernel).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.kernel).chain(self.bias.as_mut()).collect()
    }
}
