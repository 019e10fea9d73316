//! Synthetic music, dance and beat annotations.
//!
//! Music is a sustained chord plus a decaying 2 kHz click on every beat.
//! Dance is a set of components that all follow `cos(phase)`, where the phase
//! advances by `pi` per beat, so every component is stationary exactly at the
//! beat times and the movement direction reverses there. Each moving
//! component oscillates around a non-zero rest value; this keeps the frame SD
//! monotone in `cos(phase)`, so its extrema (and the weak-label flips) also
//! sit on the beats.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::audio_io::write_wav;
use crate::beats::BeatAnnotation;
use crate::dsp::{AudioClip, MOTION_FPS, NORM_LIMIT, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::motion::{write_motion_csv, MotionSequence, Quaternion, MOTION_DIM};
use crate::train::{Manifest, ManifestEntry};

pub const MIN_BPM: f64 = 60.0;
pub const MAX_BPM: f64 = 200.0;
pub const MIN_DURATION: f64 = 10.0;
pub const DEFAULT_NOISE_LEVEL: f64 = 0.01;
/// Beats per pattern segment in `mixed` dances.
pub const MIXED_SEGMENT_BEATS: usize = 8;

const CHORD_HZ: [f64; 3] = [220.0, 261.63, 329.63];
const CHORD_AMP: f64 = 0.08;
const CLICK_HZ: f64 = 2000.0;
const CLICK_AMP: f64 = 0.5;
const CLICK_DECAY_SECS: f64 = 0.006;
const CLICK_SECS: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPattern {
    LateralBounce,
    FrontBack,
    Mixed,
}

impl std::str::FromStr for StepPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lateral_bounce" => Ok(Self::LateralBounce),
            "front_back" => Ok(Self::FrontBack),
            "mixed" => Ok(Self::Mixed),
            _ => Err(Error::invalid(format!(
                "unknown step pattern {s:?} (expected lateral_bounce, front_back or mixed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub bpm: f64,
    /// Seconds.
    pub duration: f64,
    pub step_pattern: StepPattern,
    /// Jitter SD in normalized motion units.
    #[serde(default = "default_noise")]
    pub noise_level: f64,
    pub seed: u64,
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_LEVEL
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_BPM..=MAX_BPM).contains(&self.bpm) {
            return Err(Error::invalid(format!(
                "bpm {} outside [{MIN_BPM}, {MAX_BPM}]",
                self.bpm
            )));
        }
        if !(self.duration >= MIN_DURATION && self.duration.is_finite()) {
            return Err(Error::invalid(format!(
                "duration {} s is shorter than {MIN_DURATION} s",
                self.duration
            )));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::invalid(format!("noise level {} must be >= 0", self.noise_level)));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Beat times `k * 60 / bpm` for every `k` with time below `duration`.
pub fn beat_times(bpm: f64, duration: f64) -> Vec<f64> {
    let period = 60.0 / bpm;
    (0..)
        .map(|k| k as f64 * period)
        .take_while(|&t| t < duration)
        .collect()
}

pub fn gen_music(spec: &SynthSpec) -> Result<(AudioClip, BeatAnnotation)> {
    spec.validate()?;
    let sr = f64::from(SAMPLE_RATE);
    let len = (spec.duration * sr).round() as usize;
    let mut rng = spec.rng(0);
    let phase = Uniform::new(0.0, 2.0 * PI);
    let phases: Vec<f64> = CHORD_HZ.iter().map(|_| phase.sample(&mut rng)).collect();
    let mut samples: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            CHORD_HZ
                .iter()
                .zip(&phases)
                .map(|(f, p)| CHORD_AMP * (2.0 * PI * f * t + p).sin())
                .sum()
        })
        .collect();
    let beats = beat_times(spec.bpm, spec.duration);
    let click_len = (CLICK_SECS * sr) as usize;
    for &b in &beats {
        let start = (b * sr).round() as usize;
        for (i, s) in samples.iter_mut().skip(start).take(click_len).enumerate() {
            let t = i as f64 / sr;
            *s += CLICK_AMP * (-t / CLICK_DECAY_SECS).exp() * (2.0 * PI * CLICK_HZ * t).sin();
        }
    }
    Ok((AudioClip::new(samples, SAMPLE_RATE)?, BeatAnnotation::new(beats)?))
}

/// Phase that is `k * pi` at beat `k`, linear in between and extrapolated
/// with the nearest interval outside the annotated range.
fn beat_phase(beats: &[f64], t: f64) -> f64 {
    let k = match beats.partition_point(|&b| b <= t) {
        0 => 0,
        n => (n - 1).min(beats.len() - 2),
    };
    let (b0, b1) = (beats[k], beats[k + 1]);
    PI * (k as f64 + (t - b0) / (b1 - b0))
}

enum Drive {
    /// Follows the pattern's lateral axis.
    Lateral,
    /// Follows the pattern's front-back axis.
    FrontBack,
    /// Always moves.
    Both,
}

/// `(joint, axis, rest degrees, swing degrees, drive)`.
const ROTATIONS: [(usize, [f64; 3], f64, f64, Drive); 17] = [
    (0, [0.0, 1.0, 0.0], 10.0, 7.5, Drive::Lateral),
    (1, [0.0, 0.0, 1.0], -5.0, -3.0, Drive::Both),
    (2, [0.0, 0.0, 1.0], -3.0, -1.5, Drive::Both),
    (3, [1.0, 0.0, 0.0], 5.0, 4.0, Drive::FrontBack),
    (4, [1.0, 0.0, 0.0], 4.0, 3.0, Drive::FrontBack),
    (5, [0.0, 0.0, 1.0], 8.0, 2.0, Drive::Both),
    (6, [0.0, 0.0, 1.0], 60.0, 12.5, Drive::Both),
    (7, [1.0, 0.0, 0.0], 30.0, 7.5, Drive::Both),
    (8, [0.0, 0.0, 1.0], -8.0, -2.0, Drive::Both),
    (9, [0.0, 0.0, 1.0], -60.0, -12.5, Drive::Both),
    (10, [1.0, 0.0, 0.0], 30.0, 7.5, Drive::Both),
    (11, [1.0, 0.0, 0.0], -10.0, -3.0, Drive::Both),
    (12, [1.0, 0.0, 0.0], 15.0, 4.0, Drive::Both),
    (13, [1.0, 0.0, 0.0], -5.0, -1.5, Drive::Both),
    (14, [1.0, 0.0, 0.0], -10.0, 3.0, Drive::Both),
    (15, [1.0, 0.0, 0.0], 15.0, -4.0, Drive::Both),
    (16, [1.0, 0.0, 0.0], -5.0, 1.5, Drive::Both),
];

/// Root rest position and swing, metres.
const ROOT_REST: [f64; 3] = [0.5, 0.9, 2.0];
const ROOT_SWING: f64 = 0.075;
const ROOT_BOUNCE: f64 = 0.04;

pub fn gen_dance(beats: &BeatAnnotation, spec: &SynthSpec) -> Result<MotionSequence> {
    spec.validate()?;
    let times = beats.times();
    if times.len() < 2 {
        return Err(Error::invalid("dance generation needs at least 2 beats"));
    }
    let fps = f64::from(MOTION_FPS);
    let n = (spec.duration * fps).floor() as usize;
    let mut frames = Array2::zeros((n, MOTION_DIM));
    for (f, mut row) in frames.outer_iter_mut().enumerate() {
        let phase = beat_phase(times, f as f64 / fps);
        let c = phase.cos();
        let lateral = match spec.step_pattern {
            StepPattern::LateralBounce => true,
            StepPattern::FrontBack => false,
            StepPattern::Mixed => {
                let beat = (phase / PI).floor().max(0.0) as usize;
                (beat / MIXED_SEGMENT_BEATS) % 2 == 0
            }
        };
        // segments switch on beats that are multiples of 8, where cos = 1,
        // so the idle axis rests at its swing maximum without a jump
        let (cx, cz) = if lateral { (c, 1.0) } else { (1.0, c) };
        row[0] = ROOT_REST[0] + ROOT_SWING * cx;
        row[1] = ROOT_REST[1] - ROOT_BOUNCE * phase.sin().powi(2);
        row[2] = ROOT_REST[2] + ROOT_SWING * cz;
        for (joint, axis, rest, swing, drive) in &ROTATIONS {
            let drive = match drive {
                Drive::Lateral => cx,
                Drive::FrontBack => cz,
                Drive::Both => c,
            };
            let q = Quaternion::from_axis_angle(*axis, (rest + swing * drive).to_radians());
            let start = 3 + 4 * joint;
            for (k, v) in q.to_array().into_iter().enumerate() {
                row[start + k] = v;
            }
        }
    }
    if spec.noise_level > 0.0 {
        let mut rng = spec.rng(1);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut max_abs = vec![0.0f64; MOTION_DIM];
        for row in frames.outer_iter() {
            for (m, v) in max_abs.iter_mut().zip(row) {
                *m = m.max(v.abs());
            }
        }
        for mut row in frames.outer_iter_mut() {
            for (v, m) in row.iter_mut().zip(&max_abs) {
                let scale = if *m > 0.0 { m / NORM_LIMIT } else { 1.0 };
                *v += spec.noise_level * scale * unit.sample(&mut rng);
            }
        }
    }
    MotionSequence::new(frames, MOTION_FPS)
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes `track_NN.wav`, `track_NN.csv` and `track_NN.beats` for one spec.
pub fn write_track(spec: &SynthSpec, out_dir: &Path, index: usize) -> Result<ManifestEntry> {
    let (clip, beats) = gen_music(spec)?;
    let dance = gen_dance(&beats, spec)?;
    let stem = format!("track_{index:02}");
    let entry = ManifestEntry {
        audio: PathBuf::from(format!("{stem}.wav")),
        motion: PathBuf::from(format!("{stem}.csv")),
        beats: Some(PathBuf::from(format!("{stem}.beats"))),
    };
    write_wav(&out_dir.join(&entry.audio), &clip)?;
    write_motion_csv(&out_dir.join(&entry.motion), &dance)?;
    beats.write(&out_dir.join(entry.beats.as_ref().unwrap()))?;
    Ok(entry)
}

pub fn gen_dataset(specs: &[SynthSpec], out_dir: &Path) -> Result<PathBuf> {
    if specs.is_empty() {
        return Err(Error::invalid("no synthetic track specs"));
    }
    for s in specs {
        s.validate()?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = specs
        .iter()
        .enumerate()
        .map(|(i, s)| write_track(s, out_dir, i))
        .collect::<Result<Vec<_>>>()?;
    let path = out_dir.join(MANIFEST_NAME);
    Manifest { entries, snrs: Vec::new() }.write(&path)?;
    Ok(path)
}
