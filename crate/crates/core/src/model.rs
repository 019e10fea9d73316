//! Audio-to-motion sequence model.
//!
//! The encoder turns each `W x H` power block into a feature vector `g_t`
//! (four conv/batch-norm/ELU blocks, stacked LSTMs, an ELU projection). The
//! decoder consumes `[g_t, y'_t]` and emits the next motion frame through
//! stacked LSTMs and an ELU projection. In auto-conditioned mode `y'_t` is
//! the ground-truth frame only at `t = 0` and the decoder's own previous
//! output afterwards, during training as well as generation.

use std::time::Instant;

use ndarray::{concatenate, s, Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{SpectralBlock, NUM_BINS, NUM_FRAMES};
use crate::error::{Error, Result};
use crate::motion::MOTION_DIM;
use crate::nn::checkpoint::Container;
use crate::nn::gradcheck::Differentiable;
use crate::nn::{BatchNorm, BnMode, Conv2d, Elu, Linear, Lstm, LstmState, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    /// `(frequency, time)` extent.
    pub kernel: (usize, usize),
}

/// What the decoder sees as its motion input `y'_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feedback {
    /// Ground truth at `t = 0`, own output afterwards.
    #[default]
    AutoConditioned,
    /// Ground truth at every training step; own output when generating.
    TeacherForced,
    /// No motion input (zeros): the decoder maps `g_t` alone.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_bins: usize,
    pub input_frames: usize,
    pub conv: Vec<ConvSpec>,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub lstm_width: usize,
    pub enc_out: usize,
    pub motion_dim: usize,
    pub feedback: Feedback,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let conv = [16, 32, 64, 65]
            .into_iter()
            .map(|channels| ConvSpec {
                channels,
                kernel: (3, 2),
            })
            .collect();
        Self {
            input_bins: NUM_BINS,
            input_frames: NUM_FRAMES,
            conv,
            enc_layers: 3,
            dec_layers: 3,
            lstm_width: 500,
            enc_out: 65,
            motion_dim: MOTION_DIM,
            feedback: Feedback::AutoConditioned,
        }
    }
}

impl ModelConfig {
    pub fn dec_in(&self) -> usize {
        self.enc_out + self.motion_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_bins", self.input_bins),
            ("input_frames", self.input_frames),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("lstm_width", self.lstm_width),
            ("enc_out", self.enc_out),
            ("motion_dim", self.motion_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model config: {name} must be positive")));
        }
        if self.conv.iter().any(|c| c.channels == 0 || c.kernel.0 == 0 || c.kernel.1 == 0) {
            return Err(Error::invalid("model config: conv channels and kernels must be positive"));
        }
        self.conv_output()?;
        Ok(())
    }

    /// Spatial size and channels after the conv stack.
    pub fn conv_output(&self) -> Result<(usize, usize, usize)> {
        let (mut w, mut h, mut c) = (self.input_bins, self.input_frames, 1);
        for (i, spec) in self.conv.iter().enumerate() {
            if w < spec.kernel.0 || h < spec.kernel.1 {
                return Err(Error::shape(format!(
                    "conv{}: kernel {:?} does not fit {w}x{h}",
                    i + 1,
                    spec.kernel
                )));
            }
            w -= spec.kernel.0 - 1;
            h -= spec.kernel.1 - 1;
            c = spec.channels;
        }
        Ok((w, h, c))
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
    act: Elu,
    out_shape: (usize, usize, usize),
}

/// Per-layer recurrent state.
pub type EncoderState = Vec<LstmState>;

#[derive(Debug, Clone)]
pub struct Encoder {
    blocks: Vec<ConvBlock>,
    lstms: Vec<Lstm>,
    fc: Linear,
    fc_act: Elu,
    in_shape: (usize, usize),
}

/// Running gradient w.r.t. each LSTM layer's `(h, c)` during BPTT.
type Carry = Vec<Option<(Array2<f64>, Array2<f64>)>>;

fn lstm_backward_stack(lstms: &mut [Lstm], carry: &mut Carry, mut d: Array2<f64>) -> Result<Array2<f64>> {
    for (lstm, slot) in lstms.iter_mut().zip(carry.iter_mut()).rev() {
        let (dh, dc) = match slot.take() {
            Some((dh, dc)) => (dh + &d, dc),
            None => {
                let dc = Array2::zeros(d.dim());
                (d, dc)
            }
        };
        let (dx, dh_prev, dc_prev) = lstm.backward(dh.view(), dc.view())?;
        *slot = Some((dh_prev, dc_prev));
        d = dx;
    }
    Ok(d)
}

impl Encoder {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (mut w, mut h, mut c) = (cfg.input_bins, cfg.input_frames, 1);
        let mut blocks = Vec::with_capacity(cfg.conv.len());
        for (i, spec) in cfg.conv.iter().enumerate() {
            let conv = Conv2d::new(&format!("conv{}", i + 1), c, spec.channels, spec.kernel, false, rng);
            (w, h) = conv.output_size((w, h))?;
            c = spec.channels;
            blocks.push(ConvBlock {
                conv,
                bn: BatchNorm::new(&format!("bn{}", i + 1), c),
                act: Elu::new(),
                out_shape: (w, h, c),
            });
        }
        let flat = w * h * c;
        let lstms = (0..cfg.enc_layers)
            .map(|i| {
                let input = if i == 0 { flat } else { cfg.lstm_width };
                Lstm::new(&format!("enc_lstm{}", i + 1), input, cfg.lstm_width, rng)
            })
            .collect();
        Ok(Self {
            blocks,
            lstms,
            fc: Linear::new("fc01", cfg.lstm_width, cfg.enc_out, rng),
            fc_act: Elu::new(),
            in_shape: (cfg.input_bins, cfg.input_frames),
        })
    }

    pub fn initial_state(&self, batch: usize) -> EncoderState {
        self.lstms.iter().map(|l| LstmState::zeros(batch, l.hidden())).collect()
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (_, w, h, c) = x.dim();
        if (w, h, c) != (self.in_shape.0, self.in_shape.1, 1) {
            return Err(Error::shape(format!(
                "encoder expects 1x{}x{} blocks, got {c}x{w}x{h}",
                self.in_shape.0, self.in_shape.1
            )));
        }
        Ok(())
    }

    /// Inference step over a batch of blocks `[batch, W, H, 1]`.
    pub fn step(&self, x: &Array4<f64>, state: &mut EncoderState) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let batch = x.dim().0;
        let mut a = x.clone();
        for b in &self.blocks {
            let y = b.conv.forward(a.view())?;
            let (w, h, c) = b.out_shape;
            let flat = y.into_shape_with_order((batch * w * h, c)).expect("conv rows");
            let z = b.act.forward(b.bn.forward(flat.view())?.view());
            a = z.into_shape_with_order((batch, w, h, c)).expect("conv shape");
        }
        let mut input = flatten(a);
        for (l, s) in self.lstms.iter().zip(state.iter_mut()) {
            *s = l.forward(input.view(), s)?;
            input = s.h.clone();
        }
        Ok(self.fc_act.forward(self.fc.forward(input.view())?.view()))
    }

    fn step_train(&mut self, x: &Array4<f64>, state: &mut EncoderState) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let batch = x.dim().0;
        let mut a = x.clone();
        for b in &mut self.blocks {
            let y = b.conv.forward_train(a.view())?;
            let (w, h, c) = b.out_shape;
            let flat = y.into_shape_with_order((batch * w * h, c)).expect("conv rows");
            let z = b.bn.forward_train(flat.view(), BnMode::Train)?;
            let z = b.act.forward_train(z.view());
            a = z.into_shape_with_order((batch, w, h, c)).expect("conv shape");
        }
        let mut input = flatten(a);
        for (l, s) in self.lstms.iter_mut().zip(state.iter_mut()) {
            *s = l.forward_train(input.view(), s)?;
            input = s.h.clone();
        }
        let y = self.fc.forward_train(input.view())?;
        Ok(self.fc_act.forward_train(y.view()))
    }

    fn backward_step(&mut self, dg: ArrayView2<'_, f64>, carry: &mut Carry) -> Result<()> {
        let d = self.fc_act.backward(dg)?;
        let d = self.fc.backward(d.view())?;
        let d = lstm_backward_stack(&mut self.lstms, carry, d)?;
        let batch = d.nrows();
        let (w, h, c) = self.blocks.last().map(|b| b.out_shape).unwrap_or((self.in_shape.0, self.in_shape.1, 1));
        let mut d = d.into_shape_with_order((batch, w, h, c)).expect("flatten inverse");
        for b in self.blocks.iter_mut().rev() {
            let (w, h, c) = b.out_shape;
            let flat = d.into_shape_with_order((batch * w * h, c)).expect("conv rows");
            let g = b.act.backward(flat.view())?;
            let g = b.bn.backward(g.view())?;
            let g = g.into_shape_with_order((batch, w, h, c)).expect("conv shape");
            d = b.conv.backward(g.view())?;
        }
        Ok(())
    }

    fn clear_cache(&mut self) {
        for b in &mut self.blocks {
            b.conv.clear_cache();
            b.bn.clear_cache();
            b.act.clear_cache();
        }
        for l in &mut self.lstms {
            l.clear_cache();
        }
        self.fc.clear_cache();
        self.fc_act.clear_cache();
    }

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.conv.params());
            out.extend(b.bn.params());
        }
        for l in &self.lstms {
            out.extend(l.params());
        }
        out.extend(self.fc.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.conv.params_mut());
            out.extend(b.bn.params_mut());
        }
        for l in &mut self.lstms {
            out.extend(l.params_mut());
        }
        out.extend(self.fc.params_mut());
        out
    }
}

fn flatten(a: Array4<f64>) -> Array2<f64> {
    let (b, w, h, c) = a.dim();
    let a = a.as_standard_layout().into_owned();
    a.into_shape_with_order((b, w * h * c)).expect("flatten")
}

/// Decoder recurrent state plus the motion frame fed back next step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<LstmState>,
    pub last_output: Array2<f64>,
    /// Number of steps taken so far.
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    lstms: Vec<Lstm>,
    out: Linear,
    out_act: Elu,
    enc_out: usize,
    motion_dim: usize,
    feedback: Feedback,
}

impl Decoder {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let lstms = (0..cfg.dec_layers)
            .map(|i| {
                let input = if i == 0 { cfg.dec_in() } else { cfg.lstm_width };
                Lstm::new(&format!("dec_lstm{}", i + 1), input, cfg.lstm_width, rng)
            })
            .collect();
        Self {
            lstms,
            out: Linear::new("out", cfg.lstm_width, cfg.motion_dim, rng),
            out_act: Elu::new(),
            enc_out: cfg.enc_out,
            motion_dim: cfg.motion_dim,
            feedback: cfg.feedback,
        }
    }

    /// Zero recurrent state; the first motion input is the zero vector.
    pub fn initial_state(&self, batch: usize) -> DecoderState {
        DecoderState {
            layers: self.lstms.iter().map(|l| LstmState::zeros(batch, l.hidden())).collect(),
            last_output: Array2::zeros((batch, self.motion_dim)),
            step: 0,
        }
    }

    /// Decoder input `[g_t, y'_t]` for the next step.
    pub fn input_for(&self, g: ArrayView2<'_, f64>, state: &DecoderState, teacher: Option<ArrayView2<'_, f64>>) -> Result<Array2<f64>> {
        if g.ncols() != self.enc_out {
            return Err(Error::shape(format!(
                "decoder expects {}-d encoder features, got {}",
                self.enc_out,
                g.ncols()
            )));
        }
        let motion = match (teacher, self.feedback) {
            (_, Feedback::None) => Array2::zeros((g.nrows(), self.motion_dim)),
            (Some(_), Feedback::AutoConditioned) if state.step > 0 => {
                return Err(Error::State(format!(
                    "auto-conditioned decoder takes ground truth only at step 0 (now at step {})",
                    state.step
                )))
            }
            (Some(y), _) => y.to_owned(),
            (None, _) => state.last_output.clone(),
        };
        if motion.dim() != (g.nrows(), self.motion_dim) {
            return Err(Error::shape(format!(
                "motion input {:?}, expected [{}, {}]",
                motion.dim(),
                g.nrows(),
                self.motion_dim
            )));
        }
        Ok(concatenate(Axis(1), &[g.reborrow(), motion.view()]).expect("same rows"))
    }

    /// One inference step. `teacher` replaces the fed-back frame (allowed at
    /// step 0 only when auto-conditioned).
    pub fn step(&self, g: ArrayView2<'_, f64>, state: &mut DecoderState, teacher: Option<ArrayView2<'_, f64>>) -> Result<Array2<f64>> {
        let mut input = self.input_for(g, state, teacher)?;
        for (l, s) in self.lstms.iter().zip(state.layers.iter_mut()) {
            *s = l.forward(input.view(), s)?;
            input = s.h.clone();
        }
        let m = self.out_act.forward(self.out.forward(input.view())?.view());
        state.last_output = m.clone();
        state.step += 1;
        Ok(m)
    }

    fn step_train(&mut self, input: &Array2<f64>, layers: &mut [LstmState]) -> Result<Array2<f64>> {
        let mut x = input.clone();
        for (l, s) in self.lstms.iter_mut().zip(layers.iter_mut()) {
            *s = l.forward_train(x.view(), s)?;
            x = s.h.clone();
        }
        let y = self.out.forward_train(x.view())?;
        Ok(self.out_act.forward_train(y.view()))
    }

    /// Returns the gradient w.r.t. the step input `[g_t, y'_t]`.
    fn backward_step(&mut self, dm: ArrayView2<'_, f64>, carry: &mut Carry) -> Result<Array2<f64>> {
        let d = self.out_act.backward(dm)?;
        let d = self.out.backward(d.view())?;
        lstm_backward_stack(&mut self.lstms, carry, d)
    }

    fn clear_cache(&mut self) {
        for l in &mut self.lstms {
            l.clear_cache();
        }
        self.out.clear_cache();
        self.out_act.clear_cache();
    }

    fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.lstms.iter().flat_map(|l| l.params()).collect();
        out.extend(self.out.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.lstms.iter_mut().flat_map(|l| l.params_mut()).collect();
        out.extend(self.out.params_mut());
        out
    }
}

/// Mean over batch and components of the squared difference.
pub fn mse_loss(target: ArrayView2<'_, f64>, output: ArrayView2<'_, f64>) -> Result<f64> {
    if target.dim() != output.dim() {
        return Err(Error::shape(format!(
            "mse: target {:?} vs output {:?}",
            target.dim(),
            output.dim()
        )));
    }
    if target.is_empty() {
        return Err(Error::invalid("mse over an empty batch"));
    }
    let sum: f64 = target.iter().zip(output.iter()).map(|(y, m)| (y - m) * (y - m)).sum();
    Ok(sum / target.len() as f64)
}

/// Contrastive cost for a squared feature distance `dist` and label `d`:
/// `0.5 * (d * dist^2 + (1 - d) * max(1 - dist, 0)^2)`.
pub fn contrastive_from_distance(dist: f64, d: u8) -> f64 {
    let d = f64::from(d);
    let margin = (1.0 - dist).max(0.0);
    0.5 * (d * dist * dist + (1.0 - d) * margin * margin)
}

/// Derivative of [`contrastive_from_distance`] w.r.t. `dist`.
fn contrastive_slope(dist: f64, d: u8) -> f64 {
    let d = f64::from(d);
    d * dist - (1.0 - d) * (1.0 - dist).max(0.0)
}

fn squared_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, row: usize) -> f64 {
    a.row(row).iter().zip(b.row(row)).map(|(x, y)| (y - x) * (y - x)).sum()
}

/// Contrastive cost between consecutive encoder outputs; `dist` is the
/// squared Euclidean distance `|g_next - g_t|^2`.
pub fn contrastive_loss(g_t: &[f64], g_next: &[f64], d: u8) -> Result<f64> {
    if g_t.len() != g_next.len() {
        return Err(Error::shape(format!("feature lengths {} and {}", g_t.len(), g_next.len())));
    }
    if d > 1 {
        return Err(Error::invalid(format!("weak label must be 0 or 1, got {d}")));
    }
    let dist = g_t.iter().zip(g_next).map(|(a, b)| (b - a) * (b - a)).sum();
    Ok(contrastive_from_distance(dist, d))
}

pub fn combined_loss(mse: f64, contrastive: f64, use_contrastive: bool) -> f64 {
    if use_contrastive {
        mse + contrastive.max(0.0)
    } else {
        mse
    }
}

/// Aligned training windows for a batch of `B` tracks over `T` steps.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `T` blocks, each `[B, W, H, 1]`.
    pub audio: Vec<Array4<f64>>,
    /// `T + 1` frames, each `[B, motion_dim]`; step `t` predicts `motion[t + 1]`.
    pub motion: Vec<Array2<f64>>,
    /// `T - 1` entries: label `d` pairing `g_t` with `g_{t+1}`, per window.
    pub labels: Vec<Vec<Option<u8>>>,
}

impl Batch {
    pub fn steps(&self) -> usize {
        self.audio.len()
    }

    pub fn size(&self) -> usize {
        self.audio.first().map(|a| a.dim().0).unwrap_or(0)
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (t, b) = (self.steps(), self.size());
        if t == 0 || b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if self.motion.len() != t + 1 || self.labels.len() != t.saturating_sub(1) {
            return Err(Error::shape(format!(
                "batch has {t} audio steps, {} motion frames, {} label steps",
                self.motion.len(),
                self.labels.len()
            )));
        }
        if self.audio.iter().any(|a| a.dim() != (b, cfg.input_bins, cfg.input_frames, 1))
            || self.motion.iter().any(|m| m.dim() != (b, cfg.motion_dim))
            || self.labels.iter().any(|l| l.len() != b)
        {
            return Err(Error::shape("batch entries disagree with the model configuration"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Free-running output with per-frame wall-clock forward time.
#[derive(Debug, Clone)]
pub struct Generated {
    pub motion: Array2<f64>,
    pub frame_ms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Seq2Seq {
    cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Seq2Seq {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(&cfg, rng)?;
        let decoder = Decoder::new(&cfg, rng);
        Ok(Self { cfg, encoder, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.encoder.params();
        out.extend(self.decoder.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn clear_cache(&mut self) {
        self.encoder.clear_cache();
        self.decoder.clear_cache();
    }

    /// Encodes one block (batch of one) with inference statistics.
    pub fn encode_step(&self, block: &SpectralBlock, state: &mut EncoderState) -> Result<Array2<f64>> {
        self.encoder.step(&block_tensor(std::slice::from_ref(block))?, state)
    }

    /// Auto-regressive generation from a zero initial motion frame. Output
    /// frame `t` is the decoder output after consuming block `t`.
    pub fn generate(&self, blocks: &[SpectralBlock]) -> Result<Generated> {
        let mut enc = self.encoder.initial_state(1);
        let mut dec = self.decoder.initial_state(1);
        let mut motion = Array2::zeros((blocks.len(), self.cfg.motion_dim));
        let mut frame_ms = Vec::with_capacity(blocks.len());
        for (t, block) in blocks.iter().enumerate() {
            let start = Instant::now();
            let g = self.encode_step(block, &mut enc)?;
            let m = self.decoder.step(g.view(), &mut dec, None)?;
            frame_ms.push(start.elapsed().as_secs_f64() * 1e3);
            motion.row_mut(t).assign(&m.row(0));
        }
        Ok(Generated { motion, frame_ms })
    }

    /// Forward pass over a batch in training mode; with `backprop`, gradients
    /// of the reported total are accumulated into the parameters.
    pub fn forward_backward(&mut self, batch: &Batch, use_contrastive: bool, backprop: bool) -> Result<LossReport> {
        batch.validate(&self.cfg)?;
        let result = self.run(batch, use_contrastive, backprop);
        if result.is_err() || !backprop {
            self.clear_cache();
        }
        result
    }

    /// Training-mode sweep over the batch: encoder features and decoder
    /// outputs per step. Leaves caches for [`Self::forward_backward`].
    fn sweep(&mut self, batch: &Batch) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
        let (steps, size) = (batch.steps(), batch.size());
        let dim = self.cfg.motion_dim;
        let feedback = self.cfg.feedback;
        let mut enc_state = self.encoder.initial_state(size);
        let mut dec_layers = self.decoder.initial_state(size).layers;
        let mut features = Vec::with_capacity(steps);
        let mut outputs = Vec::with_capacity(steps);
        let mut prev = match feedback {
            Feedback::None => Array2::zeros((size, dim)),
            _ => batch.motion[0].clone(),
        };
        for t in 0..steps {
            let g = self.encoder.step_train(&batch.audio[t], &mut enc_state)?;
            let input = concatenate(Axis(1), &[g.view(), prev.view()]).expect("same rows");
            let m = self.decoder.step_train(&input, &mut dec_layers)?;
            prev = match feedback {
                Feedback::AutoConditioned => m.clone(),
                Feedback::TeacherForced => batch.motion[t + 1].clone(),
                Feedback::None => Array2::zeros((size, dim)),
            };
            features.push(g);
            outputs.push(m);
        }
        Ok((features, outputs))
    }

    /// Training-mode decoder outputs, one `[B, motion_dim]` per step.
    pub fn train_outputs(&mut self, batch: &Batch) -> Result<Vec<Array2<f64>>> {
        batch.validate(&self.cfg)?;
        let result = self.sweep(batch);
        self.clear_cache();
        Ok(result?.1)
    }

    fn run(&mut self, batch: &Batch, use_contrastive: bool, backprop: bool) -> Result<LossReport> {
        let (steps, size) = (batch.steps(), batch.size());
        let dim = self.cfg.motion_dim;
        let enc_out = self.cfg.enc_out;
        let feedback = self.cfg.feedback;
        let (features, outputs) = self.sweep(batch)?;

        let count = (steps * size * dim) as f64;
        let mut sq = 0.0;
        for (m, y) in outputs.iter().zip(&batch.motion[1..]) {
            sq += m.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        let mse = sq / count;

        let mut pairs = Vec::new();
        let mut c_sum = 0.0;
        for (t, labels) in batch.labels.iter().enumerate() {
            for (b, label) in labels.iter().enumerate() {
                if let Some(d) = *label {
                    let dist = squared_distance(features[t].view(), features[t + 1].view(), b);
                    c_sum += contrastive_from_distance(dist, d);
                    pairs.push((t, b, d, dist));
                }
            }
        }
        let contrastive = if pairs.is_empty() { 0.0 } else { c_sum / pairs.len() as f64 };
        let contrastive = if use_contrastive { contrastive } else { 0.0 };
        let report = LossReport {
            mse,
            contrastive,
            total: combined_loss(mse, contrastive, use_contrastive),
        };
        if !(report.total.is_finite()) {
            return Err(Error::Numeric(format!("loss is not finite: {report:?}")));
        }
        if !backprop {
            return Ok(report);
        }

        let mut dg: Vec<Array2<f64>> = (0..steps).map(|_| Array2::zeros((size, enc_out))).collect();
        if use_contrastive && contrastive > 0.0 {
            let scale = 1.0 / pairs.len() as f64;
            for &(t, b, d, dist) in &pairs {
                let coeff = 2.0 * scale * contrastive_slope(dist, d);
                if coeff == 0.0 {
                    continue;
                }
                for k in 0..enc_out {
                    let delta = features[t + 1][[b, k]] - features[t][[b, k]];
                    dg[t + 1][[b, k]] += coeff * delta;
                    dg[t][[b, k]] -= coeff * delta;
                }
            }
        }

        let mut carry: Carry = vec![None; self.cfg.dec_layers];
        let mut fed_back: Option<Array2<f64>> = None;
        for t in (0..steps).rev() {
            let mut dm = (&outputs[t] - &batch.motion[t + 1]) * (2.0 / count);
            if let Some(f) = fed_back.take() {
                dm += &f;
            }
            let d_in = self.decoder.backward_step(dm.view(), &mut carry)?;
            dg[t] += &d_in.slice(s![.., ..enc_out]);
            if feedback == Feedback::AutoConditioned && t > 0 {
                fed_back = Some(d_in.slice(s![.., enc_out..]).to_owned());
            }
        }
        let mut carry: Carry = vec![None; self.cfg.enc_layers];
        for t in (0..steps).rev() {
            self.encoder.backward_step(dg[t].view(), &mut carry)?;
        }
        Ok(report)
    }

    /// Writes every parameter and buffer plus the JSON config.
    pub fn write_to(&self, c: &mut Container) {
        c.meta.insert(
            "model_config".into(),
            serde_json::to_string(&self.cfg).expect("config serializes"),
        );
        for p in self.params() {
            c.insert_array(p.name.clone(), p.shape.clone(), p.value.clone());
        }
    }

    /// Overwrites parameters from a container; every array must be present
    /// with the shape this model expects.
    pub fn load_params(&mut self, c: &Container) -> Result<()> {
        for p in self.params_mut() {
            let arr = c.array(&p.name)?;
            if arr.shape != p.shape {
                return Err(Error::shape(format!(
                    "checkpoint {} has shape {:?}, model expects {:?}",
                    p.name, arr.shape, p.shape
                )));
            }
            p.value.clone_from(&arr.data);
        }
        Ok(())
    }

    /// Rebuilds a model from the config stored in the container.
    pub fn from_container(c: &Container) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(c.meta("model_config")?)
            .map_err(|e| Error::Incompatible(format!("model config: {e}")))?;
        // parameters are overwritten, the init RNG only fills placeholders
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut model = Self::new(cfg, &mut rng)?;
        model.load_params(c)?;
        Ok(model)
    }
}

/// Stacks blocks into the encoder's `[batch, W, H, 1]` input.
pub fn block_tensor(blocks: &[SpectralBlock]) -> Result<Array4<f64>> {
    let (w, h) = blocks
        .first()
        .map(|b| b.power.dim())
        .ok_or_else(|| Error::invalid("no blocks"))?;
    let mut out = Array4::zeros((blocks.len(), w, h, 1));
    for (i, b) in blocks.iter().enumerate() {
        if b.power.dim() != (w, h) {
            return Err(Error::shape("blocks differ in shape"));
        }
        out.slice_mut(s![i, .., .., 0]).assign(&b.power);
    }
    Ok(out)
}

/// End-to-end check of the combined loss w.r.t. every trainable parameter.
pub struct ModelGradCheck {
    pub model: Seq2Seq,
    pub batch: Batch,
    pub use_contrastive: bool,
    indices: Vec<usize>,
}

impl ModelGradCheck {
    /// Tiny model (LSTM width 8, 2-d encoder output) unrolled for `steps`.
    pub fn new(seed: u64, steps: usize, feedback: Feedback) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            input_bins: 6,
            input_frames: 4,
            conv: vec![
                ConvSpec { channels: 2, kernel: (2, 2) },
                ConvSpec { channels: 3, kernel: (2, 2) },
            ],
            enc_layers: 3,
            dec_layers: 3,
            lstm_width: 8,
            enc_out: 2,
            motion_dim: 3,
            feedback,
        };
        let mut model = Seq2Seq::new(cfg.clone(), &mut rng).expect("valid config");
        for p in model.params_mut() {
            if p.trainable && !p.name.ends_with("gamma") {
                for v in &mut p.value {
                    *v = rng.gen_range(-0.6..0.6);
                }
            }
        }
        let size = 2;
        let audio = (0..steps)
            .map(|_| Array4::from_shape_fn((size, cfg.input_bins, cfg.input_frames, 1), |_| rng.gen_range(-0.9..0.9)))
            .collect();
        let motion = (0..=steps)
            .map(|_| Array2::from_shape_fn((size, cfg.motion_dim), |_| rng.gen_range(-0.9..0.9)))
            .collect();
        let labels = (0..steps.saturating_sub(1))
            .map(|t| (0..size).map(|b| if t == 0 && b == 0 { None } else { Some(((t + b) % 2) as u8) }).collect())
            .collect();
        let indices = model
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| i)
            .collect();
        Self {
            model,
            batch: Batch { audio, motion, labels },
            use_contrastive: true,
            indices,
        }
    }
}

impl Differentiable for ModelGradCheck {
    fn tensor_names(&self) -> Vec<String> {
        let params = self.model.params();
        self.indices.iter().map(|&i| params[i].name.clone()).collect()
    }

    fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        let i = self.indices[index];
        &mut self.model.params_mut().into_iter().nth(i).unwrap().value
    }

    fn loss(&mut self) -> Result<f64> {
        Ok(self.model.forward_backward(&self.batch, self.use_contrastive, false)?.total)
    }

    fn gradients(&mut self) -> Result<Vec<Vec<f64>>> {
        self.model.zero_grad();
        self.model.forward_backward(&self.batch, self.use_contrastive, true)?;
        let params = self.model.params();
        Ok(self.indices.iter().map(|&i| params[i].grad.clone()).collect())
    }
}
