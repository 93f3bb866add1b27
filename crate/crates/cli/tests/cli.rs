use std::path::Path;
use std::process::{Command, Output};

use xlstm_se::dsp::{wav_read, wav_write, WavFormat, Waveform, SAMPLE_RATE};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xlstm-se"))
        .args(args)
        .env_remove("XLSTM_SE_CHECKPOINT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tone(path: &Path, len: usize) -> Waveform {
    let s = (0..len)
        .map(|n| {
            let t = n as f64 / f64::from(SAMPLE_RATE);
            0.4 * (2.0 * std::f64::consts::PI * 220.0 * t).sin()
                + 0.1 * (2.0 * std::f64::consts::PI * 1370.0 * t).cos()
        })
        .collect();
    let w = Waveform::new(s, SAMPLE_RATE).unwrap();
    wav_write(path, &w, WavFormat::Float32).unwrap();
    w
}

#[test]
fn param_count_passes_for_the_reference_presets() {
    let o = run(&["param-count"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("tolerances:"));
    assert!(!s.contains("FAIL"), "{s}");
    assert!(s.contains("xlstm-senet2") && s.contains("unidirectional < xlstm-senet"));
}

#[test]
fn unknown_preset_is_a_usage_error() {
    let o = run(&["param-count", "huge"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown preset"));
}

#[test]
fn gradcheck_filters_one_op() {
    let o = run(&["gradcheck", "--op", "sigmoid"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = stdout(&o);
    let rows: Vec<&str> = s.lines().filter(|l| l.contains(" skipped ")).collect();
    assert_eq!(rows.len(), 1, "{s}");
    assert!(rows[0].starts_with("sigmoid") && rows[0].ends_with("PASS"));
}

#[test]
fn corrupt_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "channels = eight\n").unwrap();
    let o = run(&[
        "gradcheck",
        "--op",
        "model",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("channels"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.wav");
    tone(&input, 1600);
    let out = dir.path().join("out.wav");
    let o = run(&["enhance", input.to_str().unwrap(), out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--checkpoint"));
    let o = run(&[
        "enhance",
        input.to_str().unwrap(),
        out.to_str().unwrap(),
        "--checkpoint",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not found"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn identity_enhancement_returns_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.wav");
    let clean = tone(&input, 8000);
    let out = dir.path().join("out.wav");
    let o = run(&[
        "enhance",
        input.to_str().unwrap(),
        out.to_str().unwrap(),
        "--identity",
        "--clean",
        input.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let y = wav_read(&out).unwrap();
    assert_eq!(y.len(), clean.len());
    let err = clean
        .samples
        .iter()
        .zip(&y.samples)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(err < xlstm_se::tolerance::IDENTITY_ENHANCE, "{err}");
}

#[test]
fn equiv_check_single_mode() {
    let o = run(&[
        "equiv-check",
        "--t",
        "16",
        "--d",
        "8",
        "--seeds",
        "3",
        "--mode",
        "sigmoid",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = stdout(&o);
    assert_eq!(
        s.lines().filter(|l| l.starts_with("sigmoid")).count(),
        3,
        "{s}"
    );
}

#[test]
fn equiv_check_accepts_one_step() {
    let o = run(&["equiv-check", "--t", "1", "--seeds", "2"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        stdout(&o).lines().filter(|l| l.ends_with("PASS")).count(),
        2 * 3 + 1
    );
}

#[test]
fn roundtrip_and_probes_pass() {
    let o = run(&["roundtrip-check", "--n", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let o = run(&["probe"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let o = run(&[
        "bench",
        "--seq-lens",
        "8,16,32,128",
        "--d",
        "8",
        "--kernels",
        "mlstm_recurrent,attention_naive",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(
        o.status.code() == Some(0) || o.status.code() == Some(1),
        "{}",
        stderr(&o)
    );
    let rows = xlstm_se::bench::parse_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 8);
    let o = run(&["bench", "--kernels", "rnn"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seeds_make_runs_reproducible() {
    let a = run(&[
        "equiv-check",
        "--t",
        "8",
        "--d",
        "4",
        "--seeds",
        "2",
        "--seed",
        "5",
    ]);
    let b = run(&[
        "equiv-check",
        "--t",
        "8",
        "--d",
        "4",
        "--seeds",
        "2",
        "--seed",
        "5",
    ]);
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn train_then_enhance() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let o = run(&[
        "train-toy",
        "--steps",
        "2",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(
        o.status.code() == Some(0) || o.status.code() == Some(1),
        "{}",
        stderr(&o)
    );
    assert!(stdout(&o).contains("loss ratio"));
    let input = dir.path().join("in.wav");
    tone(&input, 4000);
    let out = dir.path().join("out.wav");
    let o = Command::new(env!("CARGO_BIN_EXE_xlstm-se"))
        .args(["enhance", input.to_str().unwrap(), out.to_str().unwrap()])
        .env("XLSTM_SE_CHECKPOINT_DIR", &run_dir)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let y = wav_read(&out).unwrap();
    assert_eq!(y.len(), 4000);
    assert!(y.samples.iter().all(|v| v.is_finite()));
}
