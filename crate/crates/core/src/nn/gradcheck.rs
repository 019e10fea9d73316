//! Central finite-difference gradient checking.
//!
//! A [`Differentiable`] exposes a set of named flat tensors (inputs and
//! parameters), a scalar loss, and the analytic gradient of that loss for
//! every tensor. [`grad_check`] perturbs each entry by `+/- eps` and reports
//! the worst relative error per tensor.
//!
//! The layer harnesses below contract each layer output with a fixed random
//! projection so the upstream gradient is dense and non-trivial.

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{BatchNorm, BnMode, Conv2d, Elu, Linear, Lstm, LstmState, Param};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

pub trait Differentiable {
    fn tensor_names(&self) -> Vec<String>;
    fn tensor_mut(&mut self, index: usize) -> &mut [f64];
    fn loss(&mut self) -> Result<f64>;
    /// Analytic gradients, ordered like `tensor_names`.
    fn gradients(&mut self) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorError {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn grad_check(f: &mut dyn Differentiable, eps: f64) -> Result<GradCheckReport> {
    let analytic = f.gradients()?;
    let names = f.tensor_names();
    let mut tensors = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let n = f.tensor_mut(ti).len();
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let orig = f.tensor_mut(ti)[k];
            f.tensor_mut(ti)[k] = orig + eps;
            let plus = f.loss()?;
            f.tensor_mut(ti)[k] = orig - eps;
            let minus = f.loss()?;
            f.tensor_mut(ti)[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[ti][k], numeric));
        }
        tensors.push(TensorError {
            name,
            max_rel_error: worst,
            entries: n,
        });
    }
    Ok(GradCheckReport { tensors })
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zero_grads<'a>(params: impl IntoIterator<Item = &'a mut Param>) {
    for p in params {
        p.zero_grad();
    }
}

/// `loss = sum(proj * (x W + b))`.
pub struct LinearCheck {
    layer: Linear,
    x: Vec<f64>,
    batch: usize,
    proj: Vec<f64>,
}

impl LinearCheck {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (batch, input, output) = (3, 5, 4);
        let mut layer = Linear::new("linear", input, output, &mut rng);
        layer.bias.value = random_vec(&mut rng, output, 0.5);
        Self {
            x: random_vec(&mut rng, batch * input, 1.0),
            proj: random_vec(&mut rng, batch * output, 1.0),
            layer,
            batch,
        }
    }

    fn x(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.batch, self.layer.input_dim()), self.x.clone()).unwrap()
    }
}

impl Differentiable for LinearCheck {
    fn tensor_names(&self) -> Vec<String> {
        vec!["input".into(), self.layer.weight.name.clone(), self.layer.bias.name.clone()]
    }

    fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        match index {
            0 => &mut self.x,
            1 => &mut self.layer.weight.value,
            _ => &mut self.layer.bias.value,
        }
    }

    fn loss(&mut self) -> Result<f64> {
        let y = self.layer.forward(self.x().view())?;
        Ok(dot(y.as_slice().unwrap(), &self.proj))
    }

    fn gradients(&mut self) -> Result<Vec<Vec<f64>>> {
        zero_grads(self.layer.params_mut());
        let y = self.layer.forward_train(self.x().view())?;
        let dy = Array2::from_shape_vec(y.dim(), self.proj.clone()).unwrap();
        let dx = self.layer.backward(dy.view())?;
        Ok(vec![dx.into_raw_vec_and_offset().0, self.layer.weight.grad.clone(), self.layer.bias.grad.clone()])
    }
}

/// Three-step unroll: `loss = sum_t proj_h[t] . h_t + proj_c . c_T`.
pub struct LstmCheck {
    layer: Lstm,
    xs: Vec<f64>,
    h0: Vec<f64>,
    c0: Vec<f64>,
    proj_h: Vec<f64>,
    proj_c: Vec<f64>,
    batch: usize,
    steps: usize,
}

impl LstmCheck {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (batch, input, hidden, steps) = (2, 3, 4, 3);
        let mut layer = Lstm::new("lstm", input, hidden, &mut rng);
        for p in layer.params_mut() {
            p.value = random_vec(&mut rng, p.len(), 0.8);
        }
        Self {
            xs: random_vec(&mut rng, steps * batch * input, 1.0),
            h0: random_vec(&mut rng, batch * hidden, 0.5),
            c0: random_vec(&mut rng, batch * hidden, 0.5),
            proj_h: random_vec(&mut rng, steps * batch * hidden, 1.0),
            proj_c: random_vec(&mut rng, batch * hidden, 1.0),
            layer,
            batch,
            steps,
        }
    }

    fn step_input(&self, t: usize) -> Array2<f64> {
        let n = self.batch * self.layer.input_dim();
        Array2::from_shape_vec((self.batch, self.layer.input_dim()), self.xs[t * n..(t + 1) * n].to_vec()).unwrap()
    }

    fn initial(&self) -> LstmState {
        let shape = (self.batch, self.layer.hidden());
        LstmState {
            h: Array2::from_shape_vec(shape, self.h0.clone()).unwrap(),
            c: Array2::from_shape_vec(shape, self.c0.clone()).unwrap(),
        }
    }

    fn proj_h(&self, t: usize) -> &[f64] {
        let n = self.batch * self.layer.hidden();
        &self.proj_h[t * n..(t + 1) * n]
    }
}

impl Differentiable for LstmCheck {
    fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["input".to_string(), "h0".into(), "c0".into()];
        names.extend(self.layer.params().iter().map(|p| p.name.clone()));
        names
    }

    fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        match index {
            0 => &mut self.xs,
            1 => &mut self.h0,
            2 => &mut self.c0,
            i => &mut self.layer.params_mut().into_iter().nth(i - 3).unwrap().value,
        }
    }

    fn loss(&mut self) -> Result<f64> {
        let mut state = self.initial();
        let mut total = 0.0;
        for t in 0..self.steps {
            state = self.layer.forward(self.step_input(t).view(), &state)?;
            total += dot(state.h.as_slice().unwrap(), self.proj_h(t));
        }
        Ok(total + dot(state.c.as_slice().unwrap(), &self.proj_c))
    }

    fn gradients(&mut self) -> Result<Vec<Vec<f64>>> {
        zero_grads(self.layer.params_mut());
        let mut state = self.initial();
        for t in 0..self.steps {
            state = self.layer.forward_train(self.step_input(t).view(), &state)?;
        }
        let shape = (self.batch, self.layer.hidden());
        let mut dh = Array2::<f64>::zeros(shape);
        let mut dc = Array2::from_shape_vec(shape, self.proj_c.clone()).unwrap();
        let mut dxs = vec![Vec::new(); self.steps];
        for t in (0..self.steps).rev() {
            dh += &Array2::from_shape_vec(shape, self.proj_h(t).to_vec()).unwrap();
            let (dx, dh_prev, dc_prev) = self.layer.backward(dh.view(), dc.view())?;
            dxs[t] = dx.into_raw_vec_and_offset().0;
            dh = dh_prev;
            dc = dc_prev;
        }
        let mut out = vec![dxs.concat(), dh.into_raw_vec_and_offset().0, dc.into_raw_vec_and_offset().0];
        out.extend(self.layer.params().iter().map(|p| p.grad.clone()));
        Ok(out)
    }
}

pub struct ConvCheck {
    layer: Conv2d,
    x: Vec<f64>,
    shape: (usize, usize, usize, usize),
    proj: Vec<f64>,
}

impl ConvCheck {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = (2, 6, 4, 3);
        let mut layer = Conv2d::new("conv", 3, 4, (3, 2), true, &mut rng);
        let b = layer.bias.as_mut().unwrap();
        b.value = random_vec(&mut rng, b.len(), 0.5);
        let out = layer.output_size((shape.1, shape.2)).unwrap();
        Self {
            x: random_vec(&mut rng, shape.0 * shape.1 * shape.2 * shape.3, 1.0),
            proj: random_vec(&mut rng, shape.0 * out.0 * out.1 * 4, 1.0),
            layer,
            shape,
        }
    }

    fn x(&self) -> Array4<f64> {
        Array4::from_shape_vec(self.shape, self.x.clone()).unwrap()
    }
}

impl Differentiable for ConvCheck {
    fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["input".to_string()];
        names.extend(self.layer.params().iter().map(|p| p.name.clone()));
        names
    }

    fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        match index {
            0 => &mut self.x,
            i => &mut self.layer.params_mut().into_iter().nth(i - 1).unwrap().value,
        }
    }

    fn loss(&mut self) -> Result<f64> {
        let y = self.layer.forward(self.x().view())?;
        Ok(dot(y.as_slice().unwrap(), &self.proj))
    }

    fn gradients(&mut self) -> Result<Vec<Vec<f64>>> {
        zero_grads(self.layer.params_mut());
        let y = self.layer.forward_train(self.x().view())?;
        let dy = Array4::from_shape_vec(y.dim(), self.proj.clone()).unwrap();
        let dx = self.layer.backward(dy.view())?;
        let mut out = vec![dx.into_raw_vec_and_offset().0];
        out.extend(self.layer.params().iter().map(|p| p.grad.clone()));
        Ok(out)
    }
}

/// Batch norm followed by a random projection, in either mode. The infer
/// mode uses perturbed (non-default) running statistics.
pub struct BatchNormCheck {
    layer: BatchNorm,
    x: Vec<f64>,
    rows: usize,
    proj: Vec<f64>,
    mode: BnMode,
}

impl BatchNormCheck {
    pub fn new(seed: u64, mode: BnMode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, channels) = (6, 3);
        let mut layer = BatchNorm::new("bn", channels);
        layer.gamma.value = random_vec(&mut rng, channels, 1.5);
        layer.beta.value = random_vec(&mut rng, channels, 0.5);
        layer.running_mean.value = random_vec(&mut rng, channels, 0.5);
        layer.running_var.value = (0..channels).map(|_| rng.gen_range(0.5..2.0)).collect();
        Self {
            x: random_vec(&mut rng, rows * channels, 2.0),
            proj: random_vec(&mut rng, rows * channels, 1.0),
            layer,
            rows,
            mode,
        }
    }

    fn x(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.rows, self.layer.channels()), self.x.clone()).unwrap()
    }
}

impl Differentiable for BatchNormCheck {
    fn tensor_names(&self) -> Vec<String> {
        vec!["input".into(), self.layer.gamma.name.clone(), self.layer.beta.name.clone()]
    }

    fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        match index {
            0 => &mut self.x,
            1 => &mut self.layer.gamma.value,
            _ => &mut self.layer.beta.value,
        }
    }

    fn loss(&mut self) -> Result<f64> {
        // running statistics must not drift between evaluations
        let saved = (self.layer.running_mean.value.clone(), self.layer.running_var.value.clone());
        let y = self.layer.forward_train(self.x().view(), self.mode)?;
        self.layer.clear_cache();
        self.layer.running_mean.value = saved.0;
        self.layer.running_var.value = saved.1;
        Ok(dot(y.as_slice().unwrap(), &self.proj))
    }

    fn gradients(&mut self) -> Result<Vec<Vec<f64>>> {
        zero_grads(self.layer.params_mut());
        let saved = (self.layer.running_mean.value.clone(), self.layer.running_var.value.clone());
        let y = self.layer.forward_train(self.x().view(), self.mode)?;
        self.layer.running_mean.value = saved.0;
        self.layer.running_var.value = saved.1;
        let dy = Array2::from_shape_vec(y.dim(), self.proj.clone()).unwrap();
        let dx = self.layer.backward(dy.view())?;
        Ok(vec![dx.into_raw_vec_and_offset().0, self.layer.gamma.grad.clone(), self.layer.beta.grad.clone()])
    }
}

pub struct EluCheck {
    layer: Elu,
    x: Vec<f64>,
    proj: Vec<f64>,
}

impl EluCheck {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep clear of the kink at 0, where the central difference straddles two branches
        let x = (0..12)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..2.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Self {
            layer: Elu::new(),
            x,
            proj: random_vec(&mut rng, 12, 1.0),
        }
    }

    fn x(&self) -> Array2<f64> {
        Array2::from_shape_vec((3, 4), self.x.clone()).unwrap()
    }
}

impl Differentiable for EluCheck {
    fn tensor_names(&self) -> Vec<String> {
        vec!["input".into()]
    }

    fn tensor_mut(&mut self, _index: usize) -> &mut [f64] {
        &mut self.x
    }

    fn loss(&mut self) -> Result<f64> {
        let y = self.layer.forward(self.x().view());
        Ok(dot(y.as_slice().unwrap(), &self.proj))
    }

    fn gradients(&mut self) -> Result<Vec<Vec<f64>>> {
        let y = self.layer.forward_train(self.x().view());
        let dy = Array2::from_shape_vec(y.dim(), self.proj.clone()).unwrap();
        Ok(vec![self.layer.backward(dy.view())?.into_raw_vec_and_offset().0])
    }
}

/// Wraps a check and scales its analytic gradients, for negative controls.
pub struct Corrupted<D> {
    pub inner: D,
    pub factor: f64,
}

impl<D: Differentiable> Differentiable for Corrupted<D> {
    fn tensor_names(&self) -> Vec<String> {
        self.inner.tensor_names()
    }

    fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        self.inner.tensor_mut(index)
    }

    fn loss(&mut self) -> Result<f64> {
        self.inner.loss()
    }

    fn gradients(&mut self) -> Result<Vec<Vec<f64>>> {
        let mut g = self.inner.gradients()?;
        for t in &mut g {
            for v in t.iter_mut() {
                *v *= self.factor;
            }
        }
        Ok(g)
    }
}
