//! Audio front end: noise augmentation, motion-aligned slicing, STFT power
//! and per-bin range normalization.
//!
//! Every motion frame `t` (30 fps) owns a 534-sample slice of 16 kHz audio
//! starting at `round(t * sample_rate / fps)`. The slice is cut into five
//! Hann-windowed 160-sample frames with an 80-sample hop, giving an 81 x 5
//! one-sided power matrix. Each frequency bin is then mapped linearly onto
//! `[-0.9, 0.9]` using its minimum and maximum over the whole track.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const MOTION_FPS: u32 = 30;
/// Audio samples feeding one motion frame (33 ms at 16 kHz).
pub const SLICE_LEN: usize = 534;
pub const STFT_FRAME: usize = 160;
pub const STFT_HOP: usize = 80;
/// Frequency bins (W): one-sided spectrum of a 160-point DFT.
pub const NUM_BINS: usize = STFT_FRAME / 2 + 1;
/// STFT frames per slice (H).
pub const NUM_FRAMES: usize = (SLICE_LEN - STFT_FRAME) / STFT_HOP + 1;
/// Target range after normalization.
pub const NORM_LIMIT: f64 = 0.9;

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

/// Scale applied to the noise so that `P_clip / (alpha^2 P_noise)` equals the
/// requested SNR.
pub fn noise_gain(clip_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (clip_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Adds `noise` to `clip` at the requested signal-to-noise ratio.
///
/// Both clips must have the same rate and length; trimming is the caller's job.
pub fn mix_noise(clip: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<AudioClip> {
    if clip.sample_rate != noise.sample_rate {
        return Err(Error::invalid(format!(
            "sample rate mismatch: clip {} Hz, noise {} Hz",
            clip.sample_rate, noise.sample_rate
        )));
    }
    if clip.len() != noise.len() {
        return Err(Error::invalid(format!(
            "length mismatch: clip {} samples, noise {} samples",
            clip.len(),
            noise.len()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid("snr must be finite"));
    }
    let p_clip = clip.power();
    let p_noise = noise.power();
    if p_clip <= 0.0 {
        return Err(Error::invalid("clip is silent (zero power)"));
    }
    if p_noise <= 0.0 {
        return Err(Error::invalid("noise is silent (zero power)"));
    }
    let alpha = noise_gain(p_clip, p_noise, snr_db);
    let mixed = clip
        .samples
        .iter()
        .zip(&noise.samples)
        .map(|(s, n)| s + alpha * n)
        .collect();
    AudioClip::new(mixed, clip.sample_rate)
}

/// Zero-mean, unit-variance white Gaussian noise.
pub fn white_noise<R: Rng + ?Sized>(len: usize, sample_rate: u32, rng: &mut R) -> AudioClip {
    let samples = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    AudioClip {
        samples,
        sample_rate,
    }
}

/// First sample of the slice belonging to motion frame `t`, rounding half up.
pub fn slice_start(t: usize, sample_rate: u32, fps: u32) -> usize {
    let num = 2 * t as u64 * sample_rate as u64 + fps as u64;
    (num / (2 * fps as u64)) as usize
}

pub fn slice_for_motion_frame(clip: &AudioClip, t: usize, fps: u32) -> Result<&[f64]> {
    if fps == 0 {
        return Err(Error::invalid("fps must be positive"));
    }
    let start = slice_start(t, clip.sample_rate, fps);
    let end = start + SLICE_LEN;
    if end > clip.len() {
        return Err(Error::OutOfRange(format!(
            "motion frame {t} needs samples [{start}, {end}) but clip has {}",
            clip.len()
        )));
    }
    Ok(&clip.samples[start..end])
}

/// Number of motion frames whose exact (unrounded) slice start leaves room
/// for a full slice: `floor((len - 534) * fps / sample_rate) + 1`.
pub fn block_count(len: usize, sample_rate: u32, fps: u32) -> usize {
    if len < SLICE_LEN {
        return 0;
    }
    (len - SLICE_LEN) * fps as usize / sample_rate as usize + 1
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Reusable STFT plan for 534-sample slices.
pub struct PowerSpectrum {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    buf: Vec<Complex<f64>>,
}

impl Default for PowerSpectrum {
    fn default() -> Self {
        Self::new()
    }
}

impl PowerSpectrum {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(STFT_FRAME);
        Self {
            fft,
            window: hann_window(STFT_FRAME),
            buf: vec![Complex::default(); STFT_FRAME],
        }
    }

    /// Raw `NUM_BINS x NUM_FRAMES` power matrix, `|X[k]|^2` per column.
    pub fn compute(&mut self, slice: &[f64]) -> Result<Array2<f64>> {
        if slice.len() != SLICE_LEN {
            return Err(Error::invalid(format!(
                "stft expects {SLICE_LEN} samples, got {}",
                slice.len()
            )));
        }
        let mut out = Array2::zeros((NUM_BINS, NUM_FRAMES));
        for h in 0..NUM_FRAMES {
            let frame = &slice[h * STFT_HOP..h * STFT_HOP + STFT_FRAME];
            for ((b, &x), &w) in self.buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(x * w, 0.0);
            }
            self.fft.process(&mut self.buf);
            for k in 0..NUM_BINS {
                out[[k, h]] = self.buf[k].norm_sqr();
            }
        }
        Ok(out)
    }
}

pub fn stft_power(slice: &[f64]) -> Result<Array2<f64>> {
    PowerSpectrum::new().compute(slice)
}

/// Per-frequency-bin range over a whole track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl BinStats {
    pub fn fit<'a>(raw: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Self> {
        let mut stats: Option<BinStats> = None;
        for m in raw {
            let bins = m.nrows();
            let s = stats.get_or_insert_with(|| BinStats {
                min: vec![f64::INFINITY; bins],
                max: vec![f64::NEG_INFINITY; bins],
            });
            if bins != s.min.len() {
                return Err(Error::shape(format!(
                    "power matrix has {bins} bins, expected {}",
                    s.min.len()
                )));
            }
            for (k, row) in m.outer_iter().enumerate() {
                for &v in row {
                    s.min[k] = s.min[k].min(v);
                    s.max[k] = s.max[k].max(v);
                }
            }
        }
        stats.ok_or_else(|| Error::invalid("no power matrices to fit"))
    }

    pub fn bins(&self) -> usize {
        self.min.len()
    }
}

/// Normalized power matrix for one motion frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBlock {
    /// `W x H`: frequency bins by STFT frames.
    pub power: Array2<f64>,
    pub frame_index: usize,
}

/// Maps each bin's track-wide `[min, max]` onto `[-0.9, 0.9]`; constant bins
/// map to 0.
pub fn normalize_power(raw: &Array2<f64>, stats: &BinStats, frame_index: usize) -> Result<SpectralBlock> {
    if raw.nrows() != stats.bins() {
        return Err(Error::shape(format!(
            "power matrix has {} bins, stats cover {}",
            raw.nrows(),
            stats.bins()
        )));
    }
    let mut power = raw.clone();
    for (k, mut row) in power.outer_iter_mut().enumerate() {
        let (lo, hi) = (stats.min[k], stats.max[k]);
        let span = hi - lo;
        if span > 0.0 {
            row.mapv_inplace(|v| {
                (-NORM_LIMIT + 2.0 * NORM_LIMIT * (v - lo) / span).clamp(-NORM_LIMIT, NORM_LIMIT)
            });
        } else {
            row.fill(0.0);
        }
    }
    Ok(SpectralBlock { power, frame_index })
}

/// Normalized blocks of one track together with the statistics used.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub blocks: Vec<SpectralBlock>,
    pub stats: BinStats,
    pub fps: u32,
    pub sample_rate: u32,
}

impl FeatureTrack {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Raw power matrices, one per complete motion frame.
pub fn raw_power_blocks(clip: &AudioClip, fps: u32) -> Result<Vec<Array2<f64>>> {
    if fps == 0 {
        return Err(Error::invalid("fps must be positive"));
    }
    if clip.len() < SLICE_LEN {
        return Err(Error::invalid(format!(
            "clip has {} samples, need at least {SLICE_LEN}",
            clip.len()
        )));
    }
    let n = block_count(clip.len(), clip.sample_rate, fps);
    let mut spec = PowerSpectrum::new();
    (0..n)
        .map(|t| spec.compute(slice_for_motion_frame(clip, t, fps)?))
        .collect()
}

pub fn feature_pipeline(clip: &AudioClip, fps: u32) -> Result<FeatureTrack> {
    let raw = raw_power_blocks(clip, fps)?;
    let stats = BinStats::fit(&raw)?;
    let blocks = raw
        .iter()
        .enumerate()
        .map(|(t, m)| normalize_power(m, &stats, t))
        .collect::<Result<_>>()?;
    Ok(FeatureTrack {
        blocks,
        stats,
        fps,
        sample_rate: clip.sample_rate,
    })
}
