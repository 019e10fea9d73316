//! Motion-beat extraction, beat matching and the evaluation metrics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionSequence;

/// Default beat-matching window (seconds).
pub const MATCH_TOLERANCE: f64 = 0.070;
/// Default relative speed threshold for a motion beat.
pub const BEAT_SPEED_RATIO: f64 = 0.5;
pub const HISTOGRAM_BINS: usize = 50;
const SMOOTHING: f64 = 1e-6;

/// Beat timestamps in seconds, strictly increasing and non-negative.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BeatAnnotation {
    times: Vec<f64>,
}

impl BeatAnnotation {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        for (i, &t) in times.iter().enumerate() {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::invalid(format!("beat {i} has invalid time {t}")));
            }
            if i > 0 && t <= times[i - 1] {
                return Err(Error::invalid(format!(
                    "beat times must be strictly increasing (index {i}: {} then {t})",
                    times[i - 1]
                )));
            }
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Plain text, one timestamp per line. Blank lines and `#` comments are
    /// ignored.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut times = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let t: f64 = line.parse().map_err(|_| Error::Format {
                what: "beat file",
                msg: format!("{}: line {}: {line:?}", path.display(), i + 1),
            })?;
            times.push(t);
        }
        Self::new(times)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.times {
            text.push_str(&format!("{t:.6}\n"));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    #[serde(flatten)]
    pub counts: MatchCounts,
    pub f_score: f64,
}

impl MatchReport {
    pub fn from_counts(counts: MatchCounts) -> Self {
        let denom = 2 * counts.true_positives + counts.false_positives + counts.false_negatives;
        let f_score = if denom == 0 {
            0.0
        } else {
            2.0 * counts.true_positives as f64 / denom as f64
        };
        Self { counts, f_score }
    }
}

/// `|frame[t+1] - frame[t]| * fps` for every transition.
pub fn motion_speed(seq: &MotionSequence) -> Result<Vec<f64>> {
    if seq.len() < 2 {
        return Err(Error::invalid(format!(
            "speed needs at least 2 frames, got {}",
            seq.len()
        )));
    }
    let fps = seq.fps as f64;
    Ok(seq
        .frames
        .outer_iter()
        .zip(seq.frames.outer_iter().skip(1))
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (y - x) * (y - x))
                .sum::<f64>()
                .sqrt()
                * fps
        })
        .collect())
}

/// Motion beats: local minima of transition speed that fall below
/// `ratio * mean(speed)`.
///
/// Transition `i` sits at time `(i + 0.5) / fps`. A run of equal speeds
/// bounded by larger values on both sides is one minimum located at the run
/// centre, so a pose extremum exactly on frame `t` (two equal neighbouring
/// transitions) yields `t / fps`.
pub fn extract_motion_beats(seq: &MotionSequence, ratio: f64) -> Result<BeatAnnotation> {
    if seq.len() < 3 {
        return Ok(BeatAnnotation::default());
    }
    let speed = motion_speed(seq)?;
    let mean = speed.iter().sum::<f64>() / speed.len() as f64;
    if mean <= 0.0 {
        return Ok(BeatAnnotation::default());
    }
    let threshold = ratio * mean;
    let tie = 1e-12 * mean;
    let fps = seq.fps as f64;

    // runs of (approximately) equal speed: (first, last) transition index
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (i, &s) in speed.iter().enumerate() {
        match runs.last_mut() {
            Some((_, last)) if (speed[*last] - s).abs() <= tie => *last = i,
            _ => runs.push((i, i)),
        }
    }
    let mut times = Vec::new();
    for k in 1..runs.len().saturating_sub(1) {
        let (first, last) = runs[k];
        let v = speed[first];
        if v < speed[runs[k - 1].1] && v < speed[runs[k + 1].0] && v < threshold {
            let centre = (first + last) as f64 / 2.0 + 0.5;
            times.push(centre / fps);
        }
    }
    BeatAnnotation::new(times)
}

fn is_sorted(times: &[f64]) -> bool {
    times.windows(2).all(|w| w[0] <= w[1])
}

/// One-to-one matching within `+/- tolerance`.
///
/// Reference beats are visited in time order; each takes the earliest
/// unmatched predicted beat inside its window. Windows share one width, so
/// this yields a maximum-cardinality matching.
pub fn match_beats(
    predicted: &BeatAnnotation,
    reference: &BeatAnnotation,
    tolerance: f64,
) -> Result<MatchReport> {
    match_times(predicted.times(), reference.times(), tolerance)
}

pub fn match_times(predicted: &[f64], reference: &[f64], tolerance: f64) -> Result<MatchReport> {
    if !is_sorted(predicted) || !is_sorted(reference) {
        return Err(Error::invalid("beat lists must be sorted"));
    }
    if !(tolerance >= 0.0) {
        return Err(Error::invalid("tolerance must be non-negative"));
    }
    let mut next = 0;
    let mut tp = 0;
    for &r in reference {
        // same difference as the window test below, so rounding cannot
        // leave a prediction neither skipped nor matchable
        while next < predicted.len() && r - predicted[next] > tolerance {
            next += 1;
        }
        if next < predicted.len() && (predicted[next] - r).abs() <= tolerance {
            tp += 1;
            next += 1;
        }
    }
    Ok(MatchReport::from_counts(MatchCounts {
        true_positives: tp,
        false_positives: predicted.len() - tp,
        false_negatives: reference.len() - tp,
    }))
}

/// Smoothed histogram of one component over `[-1, 1]`. Values outside the
/// range fall into the edge bins.
fn histogram(values: impl Iterator<Item = f64>, bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    let mut n = 0usize;
    for v in values {
        let pos = ((v + 1.0) / 2.0 * bins as f64).floor();
        let idx = if pos.is_nan() {
            0
        } else {
            pos.clamp(0.0, (bins - 1) as f64) as usize
        };
        counts[idx] += 1.0;
        n += 1;
    }
    let norm = 1.0 + bins as f64 * SMOOTHING;
    counts
        .iter()
        .map(|c| (c / n as f64 + SMOOTHING) / norm)
        .collect()
}

/// Mean over components of `-sum_b p_ref(b) ln p_gen(b)` (nats).
pub fn cross_entropy(generated: &MotionSequence, reference: &MotionSequence, bins: usize) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::invalid("cross entropy needs non-empty sequences"));
    }
    if generated.dim() != reference.dim() {
        return Err(Error::shape(format!(
            "generated has {} components, reference {}",
            generated.dim(),
            reference.dim()
        )));
    }
    if bins == 0 {
        return Err(Error::invalid("bins must be positive"));
    }
    let dim = reference.dim();
    let mut total = 0.0;
    for c in 0..dim {
        let p = histogram(reference.frames.column(c).iter().copied(), bins);
        let q = histogram(generated.frames.column(c).iter().copied(), bins);
        total -= p.iter().zip(&q).map(|(pi, qi)| pi * qi.ln()).sum::<f64>();
    }
    Ok(total / dim as f64)
}
