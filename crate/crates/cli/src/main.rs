use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dancestep::audio_io::{read_wav, write_features};
use dancestep::beats::{cross_entropy, extract_motion_beats, match_beats, BeatAnnotation, BEAT_SPEED_RATIO, HISTOGRAM_BINS, MATCH_TOLERANCE};
use dancestep::dsp::{feature_pipeline, mix_noise, white_noise, MOTION_FPS, NORM_LIMIT};
use dancestep::model::{ModelConfig, Seq2Seq};
use dancestep::motion::{read_motion_csv, write_motion_csv, MotionSequence, Scaler};
use dancestep::nn::checkpoint::Container;
use dancestep::selfcheck;
use dancestep::synth::{write_track, StepPattern, SynthSpec, DEFAULT_NOISE_LEVEL, MANIFEST_NAME};
use dancestep::train::{Dataset, Manifest, Trainer, TrainingConfig};
use dancestep::Error;

/// Worker threads for per-file fan-out (`features`, `synth`).
const WORKERS_ENV: &str = "DANCESTEP_WORKERS";

#[derive(Parser)]
#[command(name = "dancestep", version, about = "Music-to-dance sequence model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract normalized power-spectrum blocks from a 16 kHz WAV file.
    Features(FeaturesArgs),
    /// Generate a synthetic music/dance dataset and its manifest.
    Synth(SynthArgs),
    /// Train a model from a manifest.
    Train(TrainArgs),
    /// Generate motion for an audio file from a checkpoint.
    Generate(GenerateArgs),
    /// Score motion beats against a beat annotation.
    Eval(EvalArgs),
    /// Run all finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Serialize)]
struct FeaturesArgs {
    audio: PathBuf,
    /// Output file for the clean features; noisy variants get an `.snrN` infix.
    #[arg(short, long)]
    out: PathBuf,
    /// Also write variants with white noise at these SNRs (dB).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    snr: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(short, long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    tracks: usize,
    /// Tempo of track `i` is `bpm[i % len]`.
    #[arg(long, value_delimiter = ',', default_value = "120")]
    bpm: Vec<f64>,
    /// Seconds per track.
    #[arg(long, default_value_t = 180.0)]
    duration: f64,
    #[arg(long, default_value = "lateral_bounce")]
    pattern: String,
    /// Motion jitter SD in normalized units.
    #[arg(long, default_value_t = DEFAULT_NOISE_LEVEL)]
    noise: f64,
    /// Track `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(short, long)]
    out_dir: PathBuf,
    /// JSON file with optional `model` and `training` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Train with MSE only.
    #[arg(long)]
    no_contrastive: bool,
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    audio: PathBuf,
    /// Motion CSV to write (normalized units, scaler sidecar alongside).
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    motion: PathBuf,
    #[arg(long)]
    beats: PathBuf,
    /// Reference motion for the cross-entropy comparison.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale one check's analytic gradient (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct ConfigFile {
    model: ModelConfig,
    training: TrainingConfig,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Core(e) => match e {
                Error::InvalidInput(_) | Error::OutOfRange(_) | Error::Format { .. } | Error::Io { .. } => 2,
                Error::State(_) | Error::Incompatible(_) | Error::Shape(_) => 3,
                Error::Numeric(_) => 4,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Usage(m) => f.write_str(m),
        }
    }
}

type Outcome = Result<(), Failure>;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e }.into())
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e }.into())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn thread_pool() -> rayon::ThreadPool {
    let workers = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()).unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool")
}

fn snr_path(out: &Path, snr: f64) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.snr{snr}.{}", ext.to_string_lossy()),
        None => format!("{stem}.snr{snr}"),
    };
    out.with_file_name(name)
}

fn cmd_features(args: FeaturesArgs) -> Outcome {
    let clip = read_wav(&args.audio)?;
    let mut jobs = vec![(args.out.clone(), None)];
    jobs.extend(args.snr.iter().enumerate().map(|(i, &s)| (snr_path(&args.out, s), Some((i, s)))));
    let written: Vec<(PathBuf, usize)> = thread_pool().install(|| {
        jobs.par_iter()
            .map(|(path, snr)| {
                let input = match snr {
                    None => clip.clone(),
                    Some((i, s)) => {
                        use rand::SeedableRng;
                        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
                        rng.set_stream(1 + *i as u64);
                        mix_noise(&clip, &white_noise(clip.len(), clip.sample_rate(), &mut rng), *s)?
                    }
                };
                let track = feature_pipeline(&input, MOTION_FPS)?;
                write_features(path, &track)?;
                Ok((path.clone(), track.len()))
            })
            .collect::<Result<_, Error>>()
    })?;
    for (path, n) in &written {
        println!("{}: {n} blocks", path.display());
    }
    write_json(&parent_dir(&args.out).join("features_config.json"), &args)
}

fn cmd_synth(args: SynthArgs) -> Outcome {
    let pattern: StepPattern = args.pattern.parse()?;
    if args.tracks == 0 || args.bpm.is_empty() {
        return Err(Failure::Usage("need at least one track and one tempo".into()));
    }
    let specs: Vec<SynthSpec> = (0..args.tracks)
        .map(|i| SynthSpec {
            bpm: args.bpm[i % args.bpm.len()],
            duration: args.duration,
            step_pattern: pattern,
            noise_level: args.noise,
            seed: args.seed + i as u64,
        })
        .collect();
    for s in &specs {
        s.validate()?;
    }
    create_dir(&args.out_dir)?;
    let entries = thread_pool().install(|| {
        specs
            .par_iter()
            .enumerate()
            .map(|(i, s)| write_track(s, &args.out_dir, i))
            .collect::<Result<Vec<_>, Error>>()
    })?;
    let manifest = args.out_dir.join(MANIFEST_NAME);
    Manifest { entries, snrs: Vec::new() }.write(&manifest)?;
    println!("{}", manifest.display());
    write_json(&args.out_dir.join("synth_config.json"), &(&args, &specs))
}

fn cmd_train(args: TrainArgs) -> Outcome {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            serde_json::from_str::<ConfigFile>(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => ConfigFile::default(),
    };
    let t = &mut cfg.training;
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.batch {
        t.batch_size = v;
    }
    if let Some(v) = args.seq_len {
        t.seq_len = v;
    }
    if args.no_contrastive {
        t.use_contrastive = false;
    }
    cfg.model.validate()?;
    cfg.training.validate()?;
    create_dir(&args.out_dir)?;
    write_json(&args.out_dir.join("train_config.json"), &cfg)?;

    let manifest = Manifest::read(&args.manifest)?;
    let data = Dataset::from_manifest(&manifest, cfg.training.seed)?;
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.training.clone())?;
    let log_path = args.out_dir.join("train_log.jsonl");
    let mut log = String::new();
    for _ in 0..cfg.training.epochs {
        let report = trainer.train_epoch(&data)?;
        let line = serde_json::to_string(&report).expect("serializable");
        info!("{line}");
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
        fs::write(&log_path, &log).map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
        trainer.save(&args.out_dir.join(format!("epoch_{:03}.ckpt", report.epoch)))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct LatencyReport {
    frames: usize,
    mean_ms: f64,
    max_ms: f64,
}

fn cmd_generate(args: GenerateArgs) -> Outcome {
    let container = Container::load(&args.checkpoint)?;
    let model = Seq2Seq::from_container(&container)?;
    let scaler: Option<Scaler> = match container.meta.get("scaler") {
        Some(s) => Some(serde_json::from_str(s).map_err(|e| Error::Incompatible(format!("checkpoint scaler: {e}")))?),
        None => None,
    };
    let clip = read_wav(&args.audio)?;
    let track = feature_pipeline(&clip, MOTION_FPS)?;
    let out = model.generate(&track.blocks)?;
    let frames = out.motion.mapv(|v| v.clamp(-NORM_LIMIT, NORM_LIMIT));
    let mut seq = MotionSequence::new(frames, MOTION_FPS)?;
    seq.scaler = scaler;
    write_motion_csv(&args.out, &seq)?;
    let n = out.frame_ms.len();
    let report = LatencyReport {
        frames: n,
        mean_ms: out.frame_ms.iter().sum::<f64>() / n.max(1) as f64,
        max_ms: out.frame_ms.iter().copied().fold(0.0, f64::max),
    };
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    write_json(&args.out.with_extension("latency.json"), &report)?;
    write_json(&parent_dir(&args.out).join("generate_config.json"), &args)
}

/// Motion in normalized units: as stored when the file carries a scaler,
/// otherwise scaled by `fallback` or its own max-abs.
fn normalized(seq: &MotionSequence, fallback: Option<&Scaler>) -> Result<MotionSequence, Error> {
    if seq.scaler.is_some() {
        return Ok(seq.clone());
    }
    match fallback {
        Some(s) => s.apply(seq),
        None => Scaler::fit([seq])?.apply(seq),
    }
}

#[derive(Serialize)]
struct EvalReport {
    f_score: f64,
    true_positives: usize,
    false_positives: usize,
    false_negatives: usize,
    motion_beats: usize,
    music_beats: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    cross_entropy: Option<f64>,
}

fn cmd_eval(args: EvalArgs) -> Outcome {
    let music = BeatAnnotation::read(&args.beats)?;
    let motion = normalized(&read_motion_csv(&args.motion, MOTION_FPS)?, None)?;
    let found = extract_motion_beats(&motion, BEAT_SPEED_RATIO)?;
    let m = match_beats(&found, &music, MATCH_TOLERANCE)?;
    let cross_entropy = match &args.reference {
        Some(path) => {
            let reference = normalized(&read_motion_csv(path, MOTION_FPS)?, motion.scaler.as_ref())?;
            Some(cross_entropy(&motion, &reference, HISTOGRAM_BINS)?)
        }
        None => None,
    };
    let report = EvalReport {
        f_score: m.f_score,
        true_positives: m.counts.true_positives,
        false_positives: m.counts.false_positives,
        false_negatives: m.counts.false_negatives,
        motion_beats: found.len(),
        music_beats: music.len(),
        cross_entropy,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Outcome {
    let results = selfcheck::run_all(args.seed, args.corrupt.as_deref())?;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<24} max rel error {:.3e}  {}",
            r.name,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            for t in r.report.tensors.iter().filter(|t| t.max_rel_error > selfcheck::TOLERANCE) {
                println!("    {:<28} {:.3e}", t.name, t.max_rel_error);
            }
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed for {} (tolerance {:e})",
            failed.join(", "),
            selfcheck::TOLERANCE
        ))
        .into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Features(a) => cmd_features(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
