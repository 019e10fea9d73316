use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::{missing_cache, Param};
use crate::error::{Error, Result};

/// Hidden and cell state for a batch, each `[batch, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Array2<f64>,
    pub c: Array2<f64>,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: Array2::zeros((batch, hidden)),
            c: Array2::zeros((batch, hidden)),
        }
    }
}

#[derive(Debug, Clone)]
struct StepCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    /// Activated gates `[i | f | g | o]`.
    gates: Array2<f64>,
    c: Array2<f64>,
}

/// LSTM cell. Pre-activations are `x W_x + h W_h + b` laid out as four
/// `hidden`-wide blocks: input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_x: Param,
    pub w_h: Param,
    pub bias: Param,
    hidden: usize,
    cache: Vec<StepCache>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Lstm {
    /// Weights uniform in `+/- 1/sqrt(input + hidden)`, forget bias 1.
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((input + hidden) as f64).sqrt();
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        Self {
            w_x: Param::uniform(format!("{name}.w_x"), vec![input, 4 * hidden], bound, rng),
            w_h: Param::uniform(format!("{name}.w_h"), vec![hidden, 4 * hidden], bound, rng),
            bias: Param::new(format!("{name}.bias"), vec![4 * hidden], bias),
            hidden,
            cache: Vec::new(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.shape[0]
    }

    fn check(&self, x: &ArrayView2<'_, f64>, state: &LstmState) -> Result<()> {
        let b = x.nrows();
        if x.ncols() != self.input_dim() || state.h.dim() != (b, self.hidden) || state.c.dim() != (b, self.hidden) {
            return Err(Error::shape(format!(
                "{}: input {:?}, h {:?}, c {:?}; expected [_, {}] and [{b}, {}]",
                self.w_x.name,
                x.dim(),
                state.h.dim(),
                state.c.dim(),
                self.input_dim(),
                self.hidden
            )));
        }
        Ok(())
    }

    fn gates(&self, x: &ArrayView2<'_, f64>, h: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.w_x.mat());
        general_mat_mul(1.0, h, &self.w_h.mat(), 1.0, &mut z);
        z += &self.bias.vec();
        let hd = self.hidden;
        z.slice_mut(s![.., ..2 * hd]).mapv_inplace(sigmoid);
        z.slice_mut(s![.., 2 * hd..3 * hd]).mapv_inplace(f64::tanh);
        z.slice_mut(s![.., 3 * hd..]).mapv_inplace(sigmoid);
        z
    }

    fn combine(&self, gates: &Array2<f64>, c_prev: &Array2<f64>) -> LstmState {
        let hd = self.hidden;
        let i = gates.slice(s![.., ..hd]);
        let f = gates.slice(s![.., hd..2 * hd]);
        let g = gates.slice(s![.., 2 * hd..3 * hd]);
        let o = gates.slice(s![.., 3 * hd..]);
        let c = &f * c_prev + &i * &g;
        let h = &o * &c.mapv(f64::tanh);
        LstmState { h, c }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, state: &LstmState) -> Result<LstmState> {
        self.check(&x, state)?;
        let gates = self.gates(&x, &state.h);
        Ok(self.combine(&gates, &state.c))
    }

    pub fn forward_train(&mut self, x: ArrayView2<'_, f64>, state: &LstmState) -> Result<LstmState> {
        self.check(&x, state)?;
        let gates = self.gates(&x, &state.h);
        let next = self.combine(&gates, &state.c);
        self.cache.push(StepCache {
            x: x.to_owned(),
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            gates,
            c: next.c.clone(),
        });
        Ok(next)
    }

    /// Takes the total gradients reaching `h` and `c` of the most recent
    /// cached step; returns `(dx, dh_prev, dc_prev)`.
    pub fn backward(
        &mut self,
        dh: ArrayView2<'_, f64>,
        dc: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        let cache = self.cache.pop().ok_or_else(|| missing_cache(&self.w_x.name))?;
        let hd = self.hidden;
        let gates = &cache.gates;
        let (b, _) = gates.dim();
        let mut dz = Array2::<f64>::zeros((b, 4 * hd));
        let mut dc_prev = Array2::<f64>::zeros((b, hd));
        for r in 0..b {
            let gr = gates.row(r);
            let mut dzr = dz.row_mut(r);
            for k in 0..hd {
                let (i, f, g, o) = (gr[k], gr[hd + k], gr[2 * hd + k], gr[3 * hd + k]);
                let tc = cache.c[[r, k]].tanh();
                let dhk = dh[[r, k]];
                let dct = dc[[r, k]] + dhk * o * (1.0 - tc * tc);
                dzr[k] = dct * g * i * (1.0 - i);
                dzr[hd + k] = dct * cache.c_prev[[r, k]] * f * (1.0 - f);
                dzr[2 * hd + k] = dct * i * (1.0 - g * g);
                dzr[3 * hd + k] = dhk * tc * o * (1.0 - o);
                dc_prev[[r, k]] = dct * f;
            }
        }
        general_mat_mul(1.0, &cache.x.t(), &dz, 1.0, &mut self.w_x.grad_mat_mut());
        general_mat_mul(1.0, &cache.h_prev.t(), &dz, 1.0, &mut self.w_h.grad_mat_mut());
        Zip::from(&mut self.bias.grad_vec_mut())
            .and(&dz.sum_axis(Axis(0)))
            .for_each(|g, d| *g += d);
        let dx = dz.dot(&self.w_x.mat().t());
        let dh_prev = dz.dot(&self.w_h.mat().t());
        Ok((dx, dh_prev, dc_prev))
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w_x, &self.w_h, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_x, &mut self.w_h, &mut self.bias]
    }
}
