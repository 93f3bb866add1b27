use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use xlstm_se::bench::{
    run_bench, table, to_csv, BenchConfig, Kernel, DEFAULT_SEQ_LENS, DEFAULT_WIDTH, MIN_REPS,
};
use xlstm_se::checks;
use xlstm_se::dsp::{si_sdr_db, snr_db, wav_read, wav_write, StftConfig, WavFormat};
use xlstm_se::enhance::{enhance_waveform, EnhanceOptions};
use xlstm_se::mlstm::GatingMode;
use xlstm_se::model::{ModelConfig, SeModel, PRESETS};
use xlstm_se::tolerance::{self, Registry};
use xlstm_se::train::{load_trained, train_toy, TrainConfig, CHECKPOINT_FILE, CONFIG_FILE};
use xlstm_se::Float;

const CHECKPOINT_ENV: &str = "XLSTM_SE_CHECKPOINT_DIR";

#[derive(Parser)]
#[command(
    name = "xlstm-se",
    version,
    about = "xLSTM speech enhancement: verification, toy training, enhancement and benchmarks"
)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for batch-parallel work.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// More logging (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Finite-difference gradient checks of every op group and the tiny model.
    Gradcheck {
        /// Only this op or group.
        #[arg(long)]
        op: Option<String>,
        /// Model config for the end-to-end case (narrowed to 17 bins).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Recurrent against parallel mLSTM.
    EquivCheck {
        #[arg(long, default_value_t = 64)]
        t: usize,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::All)]
        mode: ModeArg,
    },
    /// Parameter counts against reference sizes.
    ParamCount {
        /// A preset name, or `all`.
        #[arg(default_value = "all")]
        preset: String,
        /// Count a config file instead of a preset.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Trains the small model on synthetic harmonic mixtures.
    TrainToy(TrainArgs),
    /// Enhances a 16 kHz mono WAV file.
    Enhance(EnhanceArgs),
    /// Runtime scaling of recurrent mLSTM, parallel mLSTM, naive attention and LSTM.
    Bench {
        /// CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEQ_LENS.to_vec())]
        seq_lens: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_WIDTH)]
        d: usize,
        #[arg(long, default_value_t = MIN_REPS)]
        reps: usize,
        /// Comma-separated kernel names.
        #[arg(long, value_delimiter = ',')]
        kernels: Option<Vec<String>>,
    },
    /// STFT/iSTFT reconstruction of random signals, and the mask rule.
    RoundtripCheck {
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Causality and head-isolation probes.
    Probe {
        #[arg(long, default_value_t = 16)]
        t: usize,
        #[arg(long, default_value_t = 16)]
        d: usize,
    },
    /// Builds every ablation preset and checks its gradients.
    AblationCheck,
    /// Prints the tolerance registry.
    Tolerances,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exp,
    Sigmoid,
    Mixed,
    All,
}

impl ModeArg {
    fn modes(self) -> Vec<GatingMode> {
        match self {
            ModeArg::Exp => vec![GatingMode::Exponential],
            ModeArg::Sigmoid => vec![GatingMode::Sigmoid],
            ModeArg::Mixed => vec![GatingMode::ExpInputSigmoidForget],
            ModeArg::All => GatingMode::ALL.to_vec(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory (checkpoint, config and NDJSON log).
    #[arg(long, env = CHECKPOINT_ENV, default_value = "toy-run")]
    out: PathBuf,
    /// Model config; the `tiny` preset otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch)]
    batch: usize,
    /// Train in f64 instead of f32.
    #[arg(long)]
    f64: bool,
}

#[derive(Args)]
struct EnhanceArgs {
    input: PathBuf,
    output: PathBuf,
    /// Directory written by `train-toy`.
    #[arg(long, env = CHECKPOINT_ENV)]
    checkpoint: Option<PathBuf>,
    /// Model config; defaults to the one stored with the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Clean reference for SNR reporting.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Resynthesize with the noisy phase.
    #[arg(long)]
    noisy_phase: bool,
    /// Debug model whose mask is exactly 1, with the noisy phase. Needs no checkpoint.
    #[arg(long)]
    identity: bool,
}

/// Outcome of a command that completed: pass or a failed check.
type Verdict = bool;

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<Verdict> {
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("starting the thread pool")?;
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Gradcheck { op, config } => gradcheck(op.as_deref(), config.as_deref(), seed),
        Cmd::EquivCheck { t, d, seeds, mode } => equiv_check(t, d, seeds, mode, seed),
        Cmd::ParamCount { preset, config } => param_count(&preset, config.as_deref()),
        Cmd::TrainToy(a) => train(a, seed),
        Cmd::Enhance(a) => enhance(a, seed),
        Cmd::Bench {
            out,
            seq_lens,
            d,
            reps,
            kernels,
        } => bench(out, seq_lens, d, reps, kernels, seed, cli.threads),
        Cmd::RoundtripCheck { n } => roundtrip(n, seed),
        Cmd::Probe { t, d } => probe(t, d, seed),
        Cmd::AblationCheck => ablation(seed),
        Cmd::Tolerances => {
            print!("{Registry}");
            Ok(true)
        }
    }
}

fn load_config(path: &Path) -> Result<ModelConfig> {
    ModelConfig::load(path).with_context(|| format!("reading model config {}", path.display()))
}

fn gradcheck(op: Option<&str>, config: Option<&Path>, seed: u64) -> Result<Verdict> {
    let model_cfg = config.map(load_config).transpose()?;
    print!("{Registry}");
    let cases = checks::GRAD_CASES
        .iter()
        .filter(|(n, g)| op.is_none_or(|f| f == *n || f == *g))
        .collect::<Vec<_>>();
    if cases.is_empty() {
        bail!(
            "no gradient case or group named `{}`",
            op.unwrap_or_default()
        );
    }
    let mut groups: Vec<(&str, f64, bool)> = Vec::new();
    for &&(name, group) in &cases {
        let rep = match (&model_cfg, name) {
            (Some(cfg), "model") => checks::model_gradient_for(cfg, seed)?,
            _ => checks::grad_case(name, seed)?,
        };
        println!(
            "{:<18} {:<12} checked {:>4}  skipped {:>3}  kinks {:>2}  max rel err {:.2e}  {}",
            name,
            group,
            rep.checked,
            rep.skipped,
            rep.kinks,
            rep.max_rel_err,
            verdict(rep.passed())
        );
        match groups.iter_mut().find(|g| g.0 == group) {
            Some(g) => {
                g.1 = g.1.max(rep.max_rel_err);
                g.2 &= rep.passed();
            }
            None => groups.push((group, rep.max_rel_err, rep.passed())),
        }
    }
    println!("\nper group (tolerance {:e}):", tolerance::GRAD_REL);
    for (g, err, ok) in &groups {
        println!("  {g:<12} max rel err {err:.2e}  {}", verdict(*ok));
    }
    Ok(groups.iter().all(|g| g.2))
}

fn equiv_check(t: usize, d: usize, seeds: usize, mode: ModeArg, seed: u64) -> Result<Verdict> {
    if t == 0 || d == 0 || seeds == 0 {
        bail!("--t, --d and --seeds must be positive");
    }
    print!("{Registry}");
    let cases = checks::equiv_check(t, d, seeds, &mode.modes(), seed)?;
    let mut ok = true;
    for c in &cases {
        let pass = c.diff_f64 <= tolerance::EQUIV_F64 && c.diff_f32 <= tolerance::EQUIV_F32;
        ok &= pass;
        println!(
            "{:<12} seed {:>4}  T {:>4} d {:>3}  f64 {:.2e}  f32 {:.2e}  {}",
            c.mode.name(),
            c.seed,
            c.t,
            c.d,
            c.diff_f64,
            c.diff_f32,
            verdict(pass)
        );
    }
    let max64 = cases.iter().map(|c| c.diff_f64).fold(0.0, f64::max);
    let max32 = cases.iter().map(|c| c.diff_f32).fold(0.0, f64::max);
    println!(
        "max abs diff: f64 {max64:.2e}, f32 {max32:.2e}  {}",
        verdict(ok)
    );
    Ok(ok)
}

fn param_count(preset: &str, config: Option<&Path>) -> Result<Verdict> {
    print!("{Registry}");
    if let Some(path) = config {
        let cfg = load_config(path)?;
        println!(
            "{}\n{}",
            path.display(),
            SeModel::<f32>::new(&cfg, 0)?.report()
        );
        return Ok(true);
    }
    let names: Vec<&str> = if preset == "all" {
        PRESETS.iter().map(|p| p.0).collect()
    } else {
        vec![preset]
    };
    let mut ok = true;
    let mut totals = Vec::new();
    for name in names {
        let cfg = ModelConfig::preset(name)?;
        let report = SeModel::<f32>::new(&cfg, 0)?.report();
        println!("{name}\n{report}");
        let total = report.total;
        totals.push((name, total));
        if let Some(target) = ModelConfig::reference_params_m(name) {
            let rel = (total as f64 / 1e6 - target).abs() / target;
            let pass = rel <= tolerance::PARAM_COUNT_REL;
            ok &= pass;
            println!(
                "  reference {target:.2} M, off by {:.1} %  {}\n",
                rel * 100.0,
                verdict(pass)
            );
        } else {
            println!();
        }
    }
    let total = |n: &str| totals.iter().find(|t| t.0 == n).map(|t| t.1);
    if let Some(base) = total("xlstm-senet") {
        for smaller in ["no-bias", "unidirectional"] {
            if let Some(n) = total(smaller) {
                let pass = n < base;
                ok &= pass;
                println!("{smaller} < xlstm-senet: {n} < {base}  {}", verdict(pass));
            }
        }
    }
    Ok(ok)
}

fn train(a: TrainArgs, seed: u64) -> Result<Verdict> {
    let model_cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => ModelConfig::preset("tiny")?,
    };
    let cfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        batch: a.batch,
        seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    print!("{Registry}");
    info!("training into {}", a.out.display());
    let report = if a.f64 {
        train_toy::<f64>(&model_cfg, &cfg, &a.out)
    } else {
        train_toy::<f32>(&model_cfg, &cfg, &a.out)
    }
    .context("toy training failed")?;
    let ratio = report.loss_ratio();
    let e = report.eval;
    println!("initial loss  {}", report.initial);
    println!("final loss    {}", report.final_loss);
    println!("skipped steps {}", report.skipped_steps);
    let loss_ok = ratio <= tolerance::TRAIN_LOSS_RATIO_MAX;
    let snr_ok = e.snr_improvement_db > tolerance::TRAIN_SNR_GAIN_MIN_DB;
    println!(
        "loss ratio {ratio:.3} (<= {})  {}",
        tolerance::TRAIN_LOSS_RATIO_MAX,
        verdict(loss_ok)
    );
    println!(
        "held-out SNR {:.2} dB -> {:.2} dB ({:+.2} dB)  {}",
        e.snr_noisy_db,
        e.snr_enhanced_db,
        e.snr_improvement_db,
        verdict(snr_ok)
    );
    println!(
        "held-out SI-SDR {:.2} dB -> {:.2} dB; enhanced magnitude with noisy phase {:.2} dB",
        e.si_sdr_noisy_db, e.si_sdr_enhanced_db, e.snr_enhanced_noisy_phase_db
    );
    println!("checkpoint {}", report.checkpoint.display());
    Ok(loss_ok && snr_ok)
}

fn enhance(a: EnhanceArgs, seed: u64) -> Result<Verdict> {
    let noisy = wav_read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut opts = EnhanceOptions {
        noisy_phase: a.noisy_phase,
        ..EnhanceOptions::default()
    };
    let model: SeModel<f32> = if a.identity {
        let cfg = match &a.config {
            Some(p) => load_config(p)?,
            None => ModelConfig::preset("tiny")?,
        };
        opts.noisy_phase = true;
        let mut m = SeModel::new(&cfg, seed)?;
        m.force_unit_mask()?;
        m
    } else {
        let Some(dir) = &a.checkpoint else {
            bail!("no checkpoint given: pass --checkpoint DIR or set {CHECKPOINT_ENV}");
        };
        load_model(dir, a.config.as_deref())?
    };
    check_bins(&model, opts.stft)?;
    let out = enhance_waveform(&model, &noisy, opts)?;
    wav_write(&a.output, &out, WavFormat::Float32)
        .with_context(|| format!("writing {}", a.output.display()))?;
    println!("wrote {} ({} samples)", a.output.display(), out.len());
    if let Some(path) = &a.clean {
        let clean = wav_read(path).with_context(|| format!("reading {}", path.display()))?;
        if clean.len() != noisy.len() {
            bail!(
                "clean reference has {} samples, input has {}",
                clean.len(),
                noisy.len()
            );
        }
        println!(
            "SNR    {:.2} dB -> {:.2} dB",
            snr_db(&clean.samples, &noisy.samples),
            snr_db(&clean.samples, &out.samples)
        );
        println!(
            "SI-SDR {:.2} dB -> {:.2} dB",
            si_sdr_db(&clean.samples, &noisy.samples),
            si_sdr_db(&clean.samples, &out.samples)
        );
    }
    Ok(true)
}

fn load_model<T: Float>(dir: &Path, config: Option<&Path>) -> Result<SeModel<T>> {
    let ckpt = dir.join(CHECKPOINT_FILE);
    if !ckpt.is_file() {
        bail!(
            "checkpoint {} not found (run `xlstm-se train-toy --out {}` first)",
            ckpt.display(),
            dir.display()
        );
    }
    match config {
        None => load_trained(dir)
            .with_context(|| format!("loading {} with {}", ckpt.display(), CONFIG_FILE)),
        Some(p) => {
            let cfg = load_config(p)?;
            let mut m = SeModel::new(&cfg, 0)?;
            xlstm_se::checkpoint::Checkpoint::load(&ckpt)?
                .load_into(&mut m.store)
                .with_context(|| {
                    format!(
                        "checkpoint {} does not match config {}",
                        ckpt.display(),
                        p.display()
                    )
                })?;
            Ok(m)
        }
    }
}

fn check_bins<T: Float>(model: &SeModel<T>, stft: StftConfig) -> Result<()> {
    if model.cfg.n_freq != stft.bins() {
        bail!(
            "model expects {} frequency bins, the STFT gives {}",
            model.cfg.n_freq,
            stft.bins()
        );
    }
    Ok(())
}

fn bench(
    out: Option<PathBuf>,
    seq_lens: Vec<usize>,
    d: usize,
    reps: usize,
    kernels: Option<Vec<String>>,
    seed: u64,
    threads: usize,
) -> Result<Verdict> {
    let kernels = match kernels {
        Some(names) => names
            .iter()
            .map(|n| n.parse::<Kernel>())
            .collect::<Result<Vec<_>, _>>()?,
        None => Kernel::ALL.to_vec(),
    };
    let cfg = BenchConfig {
        kernels,
        seq_lens,
        d,
        reps,
        seed,
        threads,
    };
    print!("{Registry}");
    let report = run_bench(&cfg)?;
    println!("{}", table(&report));
    if let Some(path) = out {
        std::fs::write(&path, to_csv(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    let mut ok = true;
    if let Some(s) = report.slope(Kernel::MlstmRecurrent) {
        let pass = s > tolerance::SLOPE_RECURRENT_MIN && s < tolerance::SLOPE_RECURRENT_MAX;
        println!("mlstm_recurrent slope {s:.3}  {}", verdict(pass));
    }
    if let Some(s) = report.slope(Kernel::AttentionNaive) {
        println!(
            "attention_naive slope {s:.3}  {}",
            verdict(s > tolerance::SLOPE_ATTENTION_MIN)
        );
    }
    if let Some(sep) = report.separation() {
        let pass = sep > tolerance::SLOPE_SEPARATION_MIN;
        ok &= pass;
        println!(
            "slope separation {sep:.3} (> {})  {}",
            tolerance::SLOPE_SEPARATION_MIN,
            verdict(pass)
        );
    }
    Ok(ok)
}

fn roundtrip(n: usize, seed: u64) -> Result<Verdict> {
    if n == 0 {
        bail!("--n must be positive");
    }
    print!("{Registry}");
    let err = checks::roundtrip_check(n, StftConfig::default(), seed)?;
    let rt_ok = err < tolerance::STFT_ROUND_TRIP;
    println!(
        "STFT round trip over {n} signals: max abs err {err:.2e}  {}",
        verdict(rt_ok)
    );
    let m = checks::mask_check(seed)?;
    let mask_ok = m.identity_rel < tolerance::MASK_EXACT
        && m.zero_max == 0.0
        && m.random_rel < tolerance::MASK_EXACT;
    println!(
        "mask rule: unit {:.1e}, zero {:.1e}, random {:.1e}  {}",
        m.identity_rel,
        m.zero_max,
        m.random_rel,
        verdict(mask_ok)
    );
    Ok(rt_ok && mask_ok)
}

fn probe(t: usize, d: usize, seed: u64) -> Result<Verdict> {
    if t == 0 || d < 4 || !d.is_multiple_of(4) {
        bail!("--t must be positive and --d a multiple of 4");
    }
    let mut all = checks::causality_probe(t, d, seed)?;
    all.push(checks::head_isolation_probe(t, d, seed)?);
    for p in &all {
        println!(
            "{:<34} {:>4} cases, {} violations  {}",
            p.name,
            p.cases,
            p.violations,
            verdict(p.passed())
        );
    }
    Ok(all.iter().all(|p| p.passed()))
}

fn ablation(seed: u64) -> Result<Verdict> {
    print!("{Registry}");
    let mut ok = true;
    for preset in checks::ABLATION_PRESETS {
        let r = checks::ablation_check(preset, seed)?;
        let pass = r.shapes_ok && r.grad.passed();
        ok &= pass;
        println!(
            "{:<16} {:>9} params  shapes {}  grad max rel err {:.2e}  {}",
            r.preset,
            r.params,
            verdict(r.shapes_ok),
            r.grad.max_rel_err,
            verdict(pass)
        );
    }
    Ok(ok)
}
