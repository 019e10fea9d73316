use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dancestep"))
        .args(args)
        .env("DANCESTEP_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Tiny model so the pipeline finishes in seconds.
const TINY: &str = r#"{
  "model": {"conv": [{"channels": 2, "kernel": [3, 2]}, {"channels": 2, "kernel": [3, 2]}],
            "enc_layers": 1, "dec_layers": 1, "lstm_width": 8, "enc_out": 4},
  "training": {"batch_size": 4, "seq_len": 30}
}"#;

fn pipeline(dir: &Path) -> (Vec<u8>, Vec<u8>, serde_json::Value) {
    let data = dir.join("data");
    ok(&["synth", "-o", p(&data), "--tracks", "2", "--bpm", "110,130", "--duration", "10", "--seed", "3"]);
    let config = dir.join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let run_dir = dir.join("run");
    ok(&[
        "train",
        "--manifest",
        p(&data.join("manifest.json")),
        "-o",
        p(&run_dir),
        "--config",
        p(&config),
        "--epochs",
        "2",
    ]);
    let ckpt = run_dir.join("epoch_002.ckpt");
    let out = dir.join("gen.csv");
    ok(&["generate", "--checkpoint", p(&ckpt), "--audio", p(&data.join("track_00.wav")), "-o", p(&out)]);
    assert!(dir.join("gen.latency.json").exists());
    let report = ok(&[
        "eval",
        "--motion",
        p(&out),
        "--beats",
        p(&data.join("track_00.beats")),
        "--reference",
        p(&data.join("track_00.csv")),
    ]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    (fs::read(&ckpt).unwrap(), fs::read(&out).unwrap(), report)
}

#[test]
fn end_to_end_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ckpt_a, gen_a, report_a) = pipeline(a.path());
    let (ckpt_b, gen_b, report_b) = pipeline(b.path());
    assert!(ckpt_a == ckpt_b, "checkpoints differ");
    assert!(gen_a == gen_b, "generated motion differs");
    assert_eq!(report_a, report_b);
    let f = report_a["f_score"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f));
    assert!(report_a["cross_entropy"].as_f64().unwrap() > 0.0);
}

#[test]
fn features_writes_one_file_per_snr() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "-o", p(&data), "--tracks", "1", "--duration", "10"]);
    let out = dir.path().join("feat.json");
    ok(&["features", p(&data.join("track_00.wav")), "-o", p(&out), "--snr", "0,10"]);
    for name in ["feat.json", "feat.snr0.json", "feat.snr10.json"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}

fn write_wav(path: &Path, rate: u32) {
    let spec = hound::WavSpec { channels: 1, sample_rate: rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for i in 0..rate {
        w.write_sample(((i as f64 * 0.05).sin() * 8000.0) as i16).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn exit_codes_follow_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("8k.wav");
    write_wav(&wav, 8000);
    let out = run(&["features", p(&wav), "-o", p(&dir.path().join("f.json"))]);
    assert_eq!(out.status.code(), Some(2));

    let bogus = dir.path().join("bogus.ckpt");
    fs::write(&bogus, b"DSNA\x09\x00\x00\x00garbage").unwrap();
    let ok_wav = dir.path().join("16k.wav");
    write_wav(&ok_wav, 16_000);
    let out = run(&["generate", "--checkpoint", p(&bogus), "--audio", p(&ok_wav), "-o", p(&dir.path().join("g.csv"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = run(&["eval", "--motion", p(&dir.path().join("missing.csv")), "--beats", p(&dir.path().join("x.beats"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let out = ok(&["gradcheck"]);
    assert_eq!(out.lines().filter(|l| l.contains("ok")).count(), 9, "{out}");
    let bad = run(&["gradcheck", "--corrupt", "lstm"]);
    assert_eq!(bad.status.code(), Some(4));
}
