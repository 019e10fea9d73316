//! Mini-batch training with Adam, annealed gradient noise and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio_io::read_wav;
use crate::dsp::{feature_pipeline, mix_noise, white_noise, SpectralBlock, MOTION_FPS};
use crate::error::{Error, Result};
use crate::model::{Batch, LossReport, ModelConfig, Seq2Seq};
use crate::motion::{read_motion_csv, weak_labels, MotionSequence, Scaler, WeakLabelTrack};
use crate::nn::checkpoint::Container;
use crate::nn::Param;

/// Exponent of the gradient-noise annealing schedule.
pub const NOISE_DECAY: f64 = 0.55;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `sigma_0` of the gradient noise; 0 disables it.
    pub grad_noise_sigma0: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_noise_sigma0: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub use_contrastive: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            seq_len: 150,
            epochs: 10,
            adam: AdamConfig::default(),
            seed: 0,
            use_contrastive: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if self.seq_len < 2 {
            return Err(Error::invalid(format!("seq_len must be at least 2, got {}", self.seq_len)));
        }
        let a = &self.adam;
        let ok = a.learning_rate >= 0.0
            && a.learning_rate.is_finite()
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0
            && a.grad_noise_sigma0 >= 0.0
            && a.grad_noise_sigma0.is_finite();
        if !ok {
            return Err(Error::invalid(format!("invalid Adam settings: {a:?}")));
        }
        Ok(())
    }
}

/// First and second moments, one vector per parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&mut Param]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// Noise SD at update `step` (0-based).
pub fn noise_sigma(sigma0: f64, step: u64) -> f64 {
    (sigma0 * sigma0 / (1.0 + step as f64).powf(NOISE_DECAY)).sqrt()
}

/// One bias-corrected Adam update. Gaussian noise is added to every gradient
/// entry before the moments are updated. Buffers (`trainable == false`) are
/// left alone.
pub fn adam_step<R: Rng + ?Sized>(params: &mut [&mut Param], state: &mut AdamState, cfg: &AdamConfig, rng: &mut R) -> Result<()> {
    if state.m.len() != params.len() || params.iter().zip(&state.m).any(|(p, m)| p.len() != m.len()) {
        return Err(Error::shape("optimizer state does not match the parameters"));
    }
    if let Some(p) = params.iter().find(|p| p.trainable && p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::Numeric(format!(
            "non-finite gradient in {} at update {}",
            p.name, state.step
        )));
    }
    let sigma = noise_sigma(cfg.grad_noise_sigma0, state.step);
    let t = (state.step + 1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.trainable {
            continue;
        }
        let Param { value, grad, .. } = &mut **p;
        for i in 0..value.len() {
            let mut g = grad[i];
            if sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                g += sigma * z;
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            value[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// `(audio, motion, beats)` triples plus augmentation SNRs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio: PathBuf,
    pub motion: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beats: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Each entry is also used with white noise mixed in at these SNRs (dB).
    #[serde(default)]
    pub snrs: Vec<f64>,
}

impl Manifest {
    /// Reads a manifest; relative paths are resolved against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "manifest",
            msg: format!("{}: {e}", path.display()),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut m.entries {
            e.audio = base.join(&e.audio);
            e.motion = base.join(&e.motion);
            if let Some(b) = &mut e.beats {
                *b = base.join(&*b);
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// One aligned training track: block `t` pairs with motion frame `t`.
#[derive(Debug, Clone)]
pub struct Track {
    pub name: String,
    pub blocks: Vec<SpectralBlock>,
    /// Normalized motion.
    pub motion: Array2<f64>,
    pub labels: WeakLabelTrack,
}

impl Track {
    pub fn new(name: impl Into<String>, blocks: Vec<SpectralBlock>, motion: &MotionSequence) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            blocks,
            labels: weak_labels(motion)?,
            motion: motion.frames.clone(),
        })
    }

    /// Number of valid window offsets for `seq_len` steps; a window needs
    /// `seq_len` blocks and `seq_len + 1` motion frames.
    pub fn offsets(&self, seq_len: usize) -> usize {
        let usable = self.blocks.len().min(self.motion.nrows().saturating_sub(1));
        (usable + 1).saturating_sub(seq_len)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub tracks: Vec<Track>,
    /// Scaler that produced the normalized motion.
    pub scaler: Option<Scaler>,
}

/// One window: track index and first step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pick {
    pub track: usize,
    pub offset: usize,
}

impl Dataset {
    /// Loads every manifest entry, fits one motion scaler over all tracks and
    /// adds a noisy copy of each track per SNR. Noise is seeded from `seed`.
    pub fn from_manifest(manifest: &Manifest, seed: u64) -> Result<Self> {
        if manifest.entries.is_empty() {
            return Err(Error::invalid("manifest has no entries"));
        }
        let motions = manifest
            .entries
            .iter()
            .map(|e| read_motion_csv(&e.motion, MOTION_FPS))
            .collect::<Result<Vec<_>>>()?;
        let scaler = Scaler::fit(&motions)?;
        let mut tracks = Vec::new();
        for (i, (entry, raw)) in manifest.entries.iter().zip(&motions).enumerate() {
            let motion = scaler.apply(raw)?;
            let clip = read_wav(&entry.audio)?;
            let name = entry.audio.display().to_string();
            tracks.push(Track::new(name.clone(), feature_pipeline(&clip, MOTION_FPS)?.blocks, &motion)?);
            for (j, &snr) in manifest.snrs.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1 + (i * manifest.snrs.len() + j) as u64);
                let noise = white_noise(clip.len(), clip.sample_rate(), &mut rng);
                let noisy = mix_noise(&clip, &noise, snr)?;
                let blocks = feature_pipeline(&noisy, MOTION_FPS)?.blocks;
                tracks.push(Track::new(format!("{name}@{snr}dB"), blocks, &motion)?);
            }
        }
        Ok(Self {
            tracks,
            scaler: Some(scaler),
        })
    }

    /// Stacks the windows named by `picks` into a batch of `seq_len` steps.
    pub fn assemble(&self, picks: &[Pick], seq_len: usize) -> Result<Batch> {
        let first = picks.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let (w, h) = self.tracks[first.track].blocks[0].power.dim();
        let dim = self.tracks[first.track].motion.ncols();
        let b = picks.len();
        let mut audio: Vec<Array4<f64>> = (0..seq_len).map(|_| Array4::zeros((b, w, h, 1))).collect();
        let mut motion: Vec<Array2<f64>> = (0..=seq_len).map(|_| Array2::zeros((b, dim))).collect();
        let mut labels = vec![vec![None; b]; seq_len - 1];
        for (i, p) in picks.iter().enumerate() {
            let track = self.tracks.get(p.track).ok_or_else(|| Error::invalid("pick names a missing track"))?;
            if p.offset >= track.offsets(seq_len) {
                return Err(Error::OutOfRange(format!(
                    "window at {} does not fit {} ({} blocks, {} frames)",
                    p.offset,
                    track.name,
                    track.blocks.len(),
                    track.motion.nrows()
                )));
            }
            for (t, a) in audio.iter_mut().enumerate() {
                a.slice_mut(s![i, .., .., 0]).assign(&track.blocks[p.offset + t].power);
            }
            for (t, m) in motion.iter_mut().enumerate() {
                m.row_mut(i).assign(&track.motion.row(p.offset + t));
            }
            // pair (g_t, g_t+1) uses the label of motion frame t + 1
            for (t, l) in labels.iter_mut().enumerate() {
                l[i] = track.labels.at_frame(p.offset + t + 1);
            }
        }
        Ok(Batch { audio, motion, labels })
    }
}

/// Plans one epoch: `max(1, offsets / seq_len)` windows per track at
/// uniformly random offsets, shuffled and cut into batches of at most
/// `batch_size`. Tracks too short for one window are skipped.
pub fn make_batches<R: Rng + ?Sized>(data: &Dataset, cfg: &TrainingConfig, rng: &mut R) -> Result<Vec<Vec<Pick>>> {
    let mut picks = Vec::new();
    for (i, track) in data.tracks.iter().enumerate() {
        let n = track.offsets(cfg.seq_len);
        if n == 0 {
            log::warn!(
                "skipping {}: {} blocks / {} frames are too short for {} steps",
                track.name,
                track.blocks.len(),
                track.motion.nrows(),
                cfg.seq_len
            );
            continue;
        }
        let windows = (n / cfg.seq_len).max(1);
        for _ in 0..windows {
            picks.push(Pick {
                track: i,
                offset: rng.gen_range(0..n),
            });
        }
    }
    if picks.is_empty() {
        return Err(Error::invalid("no track is long enough for one training window"));
    }
    picks.shuffle(rng);
    Ok(picks.chunks(cfg.batch_size).map(<[Pick]>::to_vec).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mse: f64,
    pub contrastive: f64,
    pub total: f64,
    pub batches: usize,
    pub wall_secs: f64,
}

/// Model, optimizer and RNG, checkpointed together.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Seq2Seq,
    pub config: TrainingConfig,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub scaler: Option<Scaler>,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Parameters are initialized from the training seed.
    pub fn new(model: ModelConfig, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = Seq2Seq::new(model, &mut rng)?;
        let adam = AdamState::new(&model.params_mut());
        Ok(Self {
            model,
            config,
            adam,
            epochs_done: 0,
            scaler: None,
            rng,
        })
    }

    pub fn plan_epoch(&mut self, data: &Dataset) -> Result<Vec<Vec<Pick>>> {
        make_batches(data, &self.config, &mut self.rng)
    }

    pub fn train_batch(&mut self, batch: &Batch) -> Result<LossReport> {
        self.model.zero_grad();
        let report = self.model.forward_backward(batch, self.config.use_contrastive, true)?;
        adam_step(&mut self.model.params_mut(), &mut self.adam, &self.config.adam, &mut self.rng)?;
        Ok(report)
    }

    /// One pass over a fresh batch plan. Reported losses are batch means.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochReport> {
        if self.scaler.is_none() {
            self.scaler.clone_from(&data.scaler);
        }
        let start = Instant::now();
        let plan = self.plan_epoch(data)?;
        let mut sum = LossReport::default();
        for picks in &plan {
            let batch = data.assemble(picks, self.config.seq_len)?;
            let r = self.train_batch(&batch)?;
            sum.mse += r.mse;
            sum.contrastive += r.contrastive;
            sum.total += r.total;
        }
        self.epochs_done += 1;
        let n = plan.len() as f64;
        Ok(EpochReport {
            epoch: self.epochs_done,
            mse: sum.mse / n,
            contrastive: sum.contrastive / n,
            total: sum.total / n,
            batches: plan.len(),
            wall_secs: start.elapsed().as_secs_f64(),
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        self.model.write_to(&mut c);
        c.meta.insert("training_config".into(), to_json(&self.config));
        c.meta.insert("epochs_done".into(), self.epochs_done.to_string());
        c.meta.insert("adam_step".into(), self.adam.step.to_string());
        c.meta.insert("rng_seed".into(), hex(&self.rng.get_seed()));
        c.meta.insert("rng_stream".into(), self.rng.get_stream().to_string());
        c.meta.insert("rng_word_pos".into(), self.rng.get_word_pos().to_string());
        if let Some(s) = &self.scaler {
            c.meta.insert("scaler".into(), to_json(s));
        }
        for (p, (m, v)) in self.model.params().iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            c.insert_array(format!("adam.m.{}", p.name), p.shape.clone(), m.clone());
            c.insert_array(format!("adam.v.{}", p.name), p.shape.clone(), v.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut model = Seq2Seq::from_container(c)?;
        let config: TrainingConfig = parse_meta(c, "training_config")?;
        let mut adam = AdamState::new(&model.params_mut());
        adam.step = parse_meta_str(c, "adam_step")?;
        for (p, (m, v)) in model.params().iter().zip(adam.m.iter_mut().zip(adam.v.iter_mut())) {
            for (name, dst) in [("m", m), ("v", v)] {
                let arr = c.array(&format!("adam.{name}.{}", p.name))?;
                if arr.shape != p.shape {
                    return Err(Error::shape(format!("optimizer state for {} has shape {:?}", p.name, arr.shape)));
                }
                dst.clone_from(&arr.data);
            }
        }
        let seed = unhex(c.meta("rng_seed")?)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(parse_meta_str(c, "rng_stream")?);
        rng.set_word_pos(parse_meta_str(c, "rng_word_pos")?);
        let scaler = match c.meta.get("scaler") {
            Some(_) => Some(parse_meta(c, "scaler")?),
            None => None,
        };
        Ok(Self {
            model,
            config,
            adam,
            epochs_done: parse_meta_str(c, "epochs_done")?,
            scaler,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn parse_meta<T: serde::de::DeserializeOwned>(c: &Container, key: &str) -> Result<T> {
    serde_json::from_str(c.meta(key)?).map_err(|e| Error::Incompatible(format!("checkpoint {key}: {e}")))
}

fn parse_meta_str<T: std::str::FromStr>(c: &Container, key: &str) -> Result<T> {
    c.meta(key)?
        .parse()
        .map_err(|_| Error::Incompatible(format!("checkpoint {key} is not a number")))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Incompatible("checkpoint rng_seed is not 32 hex bytes".into());
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_param(v: f64, g: f64) -> Param {
        let mut p = Param::new("p", vec![1], vec![v]);
        p.grad = vec![g];
        p
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            grad_noise_sigma0: 0.0,
            ..AdamConfig::default()
        };
        let mut p = scalar_param(0.5, 1.0);
        let mut params = vec![&mut p];
        let mut state = AdamState::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        adam_step(&mut params, &mut state, &cfg, &mut rng).unwrap();
        // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        assert_abs_diff_eq!(p.value[0], 0.5 - 1e-3 / (1.0 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn adam_zero_gradient_without_noise_is_identity() {
        let cfg = AdamConfig {
            grad_noise_sigma0: 0.0,
            ..AdamConfig::default()
        };
        let mut p = scalar_param(0.5, 0.0);
        let mut params = vec![&mut p];
        let mut state = AdamState::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            adam_step(&mut params, &mut state, &cfg, &mut rng).unwrap();
        }
        assert_eq!(p.value[0], 0.5);
    }

    #[test]
    fn adam_steps_are_bounded() {
        let cfg = AdamConfig {
            grad_noise_sigma0: 0.0,
            ..AdamConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = scalar_param(0.0, 0.0);
        let mut state = AdamState::new(&[&mut p]);
        let bound = cfg.learning_rate / (1.0 - cfg.beta1);
        for _ in 0..200 {
            let before = p.value[0];
            p.grad[0] = rng.gen_range(-5.0..5.0);
            adam_step(&mut [&mut p], &mut state, &cfg, &mut rng).unwrap();
            assert!((p.value[0] - before).abs() <= bound);
        }
    }

    #[test]
    fn adam_rejects_nan() {
        let mut p = scalar_param(0.0, f64::NAN);
        let mut state = AdamState::new(&[&mut p]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = adam_step(&mut [&mut p], &mut state, &AdamConfig::default(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("p")));
        assert_eq!(p.value[0], 0.0);
    }

    #[test]
    fn noise_schedule() {
        assert_eq!(noise_sigma(0.01, 0), 0.01);
        assert_abs_diff_eq!(noise_sigma(0.01, 9).powi(2), 1e-4 / 10f64.powf(0.55), epsilon = 1e-18);
        assert_eq!(noise_sigma(0.0, 5), 0.0);
    }

    #[test]
    fn rng_seed_hex_round_trip() {
        let seed: [u8; 32] = std::array::from_fn(|i| (i * 37) as u8);
        assert_eq!(unhex(&hex(&seed)).unwrap(), seed);
        assert!(unhex("zz").is_err());
    }

    #[test]
    fn config_validation() {
        TrainingConfig::default().validate().unwrap();
        let mut c = TrainingConfig {
            seq_len: 1,
            ..TrainingConfig::default()
        };
        assert!(c.validate().is_err());
        c.seq_len = 2;
        c.adam.beta1 = 1.0;
        assert!(c.validate().is_err());
    }
}
