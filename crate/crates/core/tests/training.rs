use dancestep::dsp::SpectralBlock;
use dancestep::model::{ConvSpec, ModelConfig};
use dancestep::motion::MotionSequence;
use dancestep::train::*;
use dancestep::Error;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_bins: 6,
        input_frames: 4,
        conv: vec![ConvSpec { channels: 2, kernel: (2, 2) }, ConvSpec { channels: 2, kernel: (2, 2) }],
        enc_layers: 2,
        dec_layers: 2,
        lstm_width: 6,
        enc_out: 3,
        motion_dim: 4,
        ..ModelConfig::default()
    }
}

/// Track with random blocks and a smooth motion of `frames` frames.
fn track(frames: usize, seed: u64) -> Track {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = (0..frames)
        .map(|i| SpectralBlock {
            power: Array2::from_shape_fn((6, 4), |_| rng.gen_range(-0.9..0.9)),
            frame_index: i,
        })
        .collect();
    let motion = Array2::from_shape_fn((frames, 4), |(t, c)| 0.8 * ((t as f64) * 0.2 + c as f64).sin());
    Track::new(format!("t{seed}"), blocks, &MotionSequence::new(motion, 30).unwrap()).unwrap()
}

fn dataset(lengths: &[usize]) -> Dataset {
    Dataset {
        tracks: lengths.iter().enumerate().map(|(i, &n)| track(n, i as u64)).collect(),
        scaler: None,
    }
}

fn config(seq_len: usize, batch: usize) -> TrainingConfig {
    TrainingConfig {
        batch_size: batch,
        seq_len,
        epochs: 2,
        seed: 11,
        ..TrainingConfig::default()
    }
}

#[test]
fn window_offsets_count_boundary() {
    // 151 frames: 150 blocks usable with 151 motion frames, one window of 150
    assert_eq!(track(151, 0).offsets(150), 1);
    assert_eq!(track(150, 0).offsets(150), 0);
    assert_eq!(track(160, 0).offsets(150), 10);
    let data = dataset(&[151]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let plan = make_batches(&data, &config(150, 50), &mut rng).unwrap();
    assert_eq!(plan, vec![vec![Pick { track: 0, offset: 0 }]]);
    let batch = data.assemble(&plan[0], 150).unwrap();
    assert_eq!((batch.steps(), batch.size(), batch.motion.len(), batch.labels.len()), (150, 1, 151, 149));
    assert!(matches!(data.assemble(&[Pick { track: 0, offset: 1 }], 150), Err(Error::OutOfRange(_))));
}

#[test]
fn too_short_everywhere_is_an_error() {
    let data = dataset(&[20, 30]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(make_batches(&data, &config(40, 4), &mut rng).is_err());
    // one long enough track is used, the short one skipped
    let data = dataset(&[20, 60]);
    let plan = make_batches(&data, &config(40, 4), &mut rng).unwrap();
    assert!(plan.iter().flatten().all(|p| p.track == 1));
}

#[test]
fn batch_plan_is_seed_deterministic() {
    let data = dataset(&[200, 300, 90]);
    let cfg = config(20, 7);
    let plan = |seed| make_batches(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(plan(3), plan(3));
    assert_ne!(plan(3), plan(4));
    let sizes: Vec<usize> = plan(3).iter().map(Vec::len).collect();
    // 181/20 + 281/20 + 71/20 = 9 + 14 + 3 windows
    assert_eq!(sizes.iter().sum::<usize>(), 26);
    assert!(sizes[..sizes.len() - 1].iter().all(|&s| s == 7));
}

#[test]
fn window_offsets_are_uniform() {
    // 30 offsets, chi-squared with 29 degrees of freedom
    let data = dataset(&[31 + 9]);
    let cfg = config(10, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 30];
    let mut n = 0;
    while n < 30_000 {
        for p in make_batches(&data, &cfg, &mut rng).unwrap().into_iter().flatten() {
            counts[p.offset] += 1;
            n += 1;
        }
    }
    let expected = n as f64 / 30.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 0.999 quantile of chi2(29) is 58.3
    assert!(chi2 < 58.3, "chi2 {chi2} counts {counts:?}");
}

#[test]
fn labels_in_batches_follow_track_frames() {
    let data = dataset(&[80]);
    let picks = [Pick { track: 0, offset: 0 }, Pick { track: 0, offset: 7 }];
    let batch = data.assemble(&picks, 12).unwrap();
    for (t, l) in batch.labels.iter().enumerate() {
        for (b, p) in picks.iter().enumerate() {
            assert_eq!(l[b], data.tracks[0].labels.at_frame(p.offset + t + 1));
        }
    }
    // frame 1 has no label
    assert_eq!(batch.labels[0][0], None);
    assert!(batch.labels[1][0].is_some());
}

#[test]
fn zero_learning_rate_keeps_parameters_and_loss() {
    let data = dataset(&[13]);
    let mut cfg = config(12, 4);
    cfg.adam.learning_rate = 0.0;
    cfg.adam.grad_noise_sigma0 = 0.0;
    let mut tr = Trainer::new(tiny_model(), cfg).unwrap();
    let before: Vec<Vec<f64>> = tr.model.params().iter().map(|p| p.value.clone()).collect();
    let a = tr.train_epoch(&data).unwrap();
    let b = tr.train_epoch(&data).unwrap();
    let after: Vec<Vec<f64>> = tr.model.params().iter().filter(|p| p.trainable).map(|p| p.value.clone()).collect();
    let before_trainable: Vec<Vec<f64>> = tr
        .model
        .params()
        .iter()
        .zip(before)
        .filter(|(p, _)| p.trainable)
        .map(|(_, v)| v)
        .collect();
    assert_eq!(after, before_trainable);
    // batch norm uses batch statistics in training, so the loss is unchanged
    assert_eq!(a.total, b.total);
}

#[test]
fn reported_loss_matches_recomputation_with_frozen_weights() {
    let data = dataset(&[60, 70]);
    let mut cfg = config(10, 3);
    cfg.adam.learning_rate = 0.0;
    cfg.adam.grad_noise_sigma0 = 0.0;
    let mut tr = Trainer::new(tiny_model(), cfg).unwrap();
    tr.train_epoch(&data).unwrap();
    // a clone replays the same batch plan without updating
    let mut frozen = tr.clone();
    let reported = tr.train_epoch(&data).unwrap();
    let plan = frozen.plan_epoch(&data).unwrap();
    let mut expected = LossSum::default();
    for picks in &plan {
        let batch = data.assemble(picks, 10).unwrap();
        let r = frozen.model.forward_backward(&batch, true, false).unwrap();
        expected.add(r.mse, r.contrastive, r.total);
    }
    let n = plan.len() as f64;
    assert_eq!(reported.batches, plan.len());
    assert!((reported.mse - expected.mse / n).abs() < 1e-10);
    assert!((reported.contrastive - expected.contrastive / n).abs() < 1e-10);
    assert!((reported.total - expected.total / n).abs() < 1e-10);
}

#[derive(Default)]
struct LossSum {
    mse: f64,
    contrastive: f64,
    total: f64,
}

impl LossSum {
    fn add(&mut self, mse: f64, contrastive: f64, total: f64) {
        self.mse += mse;
        self.contrastive += contrastive;
        self.total += total;
    }
}

#[test]
fn resumed_training_matches_continuous_run() {
    let data = dataset(&[60, 45]);
    let cfg = config(10, 3);
    let mut continuous = Trainer::new(tiny_model(), cfg.clone()).unwrap();
    for _ in 0..3 {
        continuous.train_epoch(&data).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e1.ckpt");
    let mut first = Trainer::new(tiny_model(), cfg).unwrap();
    first.train_epoch(&data).unwrap();
    first.save(&path).unwrap();
    let mut resumed = Trainer::load(&path).unwrap();
    assert_eq!(resumed.epochs_done, 1);
    for _ in 0..2 {
        resumed.train_epoch(&data).unwrap();
    }
    assert_eq!(resumed.to_container().to_bytes(), continuous.to_container().to_bytes());
}

#[test]
fn training_is_reproducible_and_learns() {
    let data = dataset(&[90, 90]);
    let mut cfg = config(15, 4);
    cfg.adam.learning_rate = 1e-2;
    let run = || {
        let mut tr = Trainer::new(tiny_model(), cfg.clone()).unwrap();
        let losses: Vec<f64> = (0..15).map(|_| tr.train_epoch(&data).unwrap().mse).collect();
        (losses, tr.to_container().to_bytes())
    };
    let (a, bytes_a) = run();
    let (b, bytes_b) = run();
    assert_eq!(bytes_a, bytes_b);
    assert_eq!(a, b);
    assert!(a[14] < a[0], "{a:?}");
}

#[test]
fn contrastive_off_reports_zero() {
    let data = dataset(&[40]);
    let mut cfg = config(10, 2);
    cfg.use_contrastive = false;
    let mut tr = Trainer::new(tiny_model(), cfg).unwrap();
    let r = tr.train_epoch(&data).unwrap();
    assert_eq!(r.contrastive, 0.0);
    assert_eq!(r.total, r.mse);
}

#[test]
fn motion_dim_mismatch_is_a_shape_error() {
    let data = dataset(&[40]);
    let mut mc = tiny_model();
    mc.motion_dim = 5;
    let mut tr = Trainer::new(mc, config(10, 2)).unwrap();
    assert!(matches!(tr.train_epoch(&data), Err(Error::Shape(_))));
}
