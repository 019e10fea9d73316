//! WAV decoding and the JSON-lines feature file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::{AudioClip, BinStats, FeatureTrack, SpectralBlock, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Reads a mono 16 kHz WAV (PCM16 or float32).
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::invalid(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "{}: expected {SAMPLE_RATE} Hz, found {} Hz (resampling is not supported)",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (fmt, bits) => {
            return Err(Error::invalid(format!(
                "{}: unsupported sample format {fmt:?} / {bits} bits",
                path.display()
            )))
        }
    };
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes a mono float32 WAV.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in clip.samples() {
        writer.write_sample(s as f32).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::Format {
            what: "wav file",
            msg: format!("{}: {other}", path.display()),
        },
    }
}

const FEATURE_FORMAT: &str = "dancestep-features";
const FEATURE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    format: String,
    version: u32,
    bins: usize,
    frames: usize,
    fps: u32,
    sample_rate: u32,
    count: usize,
    stats: BinStats,
}

#[derive(Serialize, Deserialize)]
struct FeatureLine {
    frame: usize,
    /// Row per frequency bin.
    power: Vec<Vec<f64>>,
}

/// Writes a feature track as JSON lines: a header carrying the per-bin
/// normalization statistics, then one line per block.
pub fn write_features(path: &Path, track: &FeatureTrack) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (bins, frames) = track
        .blocks
        .first()
        .map(|b| b.power.dim())
        .unwrap_or((track.stats.bins(), 0));
    let header = FeatureHeader {
        format: FEATURE_FORMAT.into(),
        version: FEATURE_VERSION,
        bins,
        frames,
        fps: track.fps,
        sample_rate: track.sample_rate,
        count: track.blocks.len(),
        stats: track.stats.clone(),
    };
    let mut put = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
    put(serde_json::to_string(&header).expect("header serializes"))?;
    for block in &track.blocks {
        let line = FeatureLine {
            frame: block.frame_index,
            power: block.power.outer_iter().map(|r| r.to_vec()).collect(),
        };
        put(serde_json::to_string(&line).expect("block serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureTrack> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |msg: String| Error::Format {
        what: "feature file",
        msg: format!("{}: {msg}", path.display()),
    };
    let header_line = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: FeatureHeader =
        serde_json::from_str(&header_line).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != FEATURE_FORMAT || header.version != FEATURE_VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let mut blocks = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FeatureLine =
            serde_json::from_str(&line).map_err(|e| bad(format!("block {i}: {e}")))?;
        if parsed.power.len() != header.bins || parsed.power.iter().any(|r| r.len() != header.frames) {
            return Err(bad(format!("block {i}: expected {}x{}", header.bins, header.frames)));
        }
        let flat: Vec<f64> = parsed.power.into_iter().flatten().collect();
        let power = Array2::from_shape_vec((header.bins, header.frames), flat)
            .expect("shape checked above");
        blocks.push(SpectralBlock {
            power,
            frame_index: parsed.frame,
        });
    }
    if blocks.len() != header.count {
        return Err(bad(format!(
            "header announces {} blocks, found {}",
            header.count,
            blocks.len()
        )));
    }
    Ok(FeatureTrack {
        blocks,
        stats: header.stats,
        fps: header.fps,
        sample_rate: header.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{feature_pipeline, white_noise};
    use rand::SeedableRng;

    #[test]
    fn feature_file_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let clip = white_noise(4000, SAMPLE_RATE, &mut rng);
        let track = feature_pipeline(&clip, 30).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        write_features(&path, &track).unwrap();
        assert_eq!(read_features(&path).unwrap(), track);
    }

    #[test]
    fn wav_round_trip_and_rate_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let clip = AudioClip::new(vec![0.0, 0.25, -0.5, 0.125], SAMPLE_RATE).unwrap();
        write_wav(&path, &clip).unwrap();
        assert_eq!(read_wav(&path).unwrap(), clip);

        let bad = AudioClip::new(vec![0.0; 8], 8000).unwrap();
        let bad_path = dir.path().join("b.wav");
        write_wav(&bad_path, &bad).unwrap();
        assert!(matches!(read_wav(&bad_path), Err(Error::InvalidInput(_))));
    }
}
