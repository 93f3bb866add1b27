//! Sequence-length scaling of the recurrent and parallel mLSTM forms against
//! naive softmax attention and a conventional LSTM.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::mlstm::{lstm_sequence_raw, parallel_raw, recurrent_sequence, GatingMode, MLstmState};
use crate::tensor::log_sigmoid;

pub const DEFAULT_SEQ_LENS: [usize; 5] = [512, 1024, 2048, 4096, 8192];
pub const DEFAULT_WIDTH: usize = 64;
pub const WARMUP: usize = 2;
pub const MIN_REPS: usize = 5;
/// Shortest wall time of one timed sample; faster kernels are looped.
pub const MIN_SAMPLE: Duration = Duration::from_millis(5);
pub const CSV_HEADER: &str = "kernel,T,d,median_s,iqr_s,state_bytes,slope";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kernel {
    MlstmRecurrent,
    MlstmParallel,
    AttentionNaive,
    Lstm,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [
        Kernel::MlstmRecurrent,
        Kernel::MlstmParallel,
        Kernel::AttentionNaive,
        Kernel::Lstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::MlstmRecurrent => "mlstm_recurrent",
            Kernel::MlstmParallel => "mlstm_parallel",
            Kernel::AttentionNaive => "attention_naive",
            Kernel::Lstm => "lstm",
        }
    }

    /// Bytes an inference pass must keep to emit the next output: the fixed
    /// recurrent state, or every key and value seen so far.
    pub fn state_bytes(self, t: usize, d: usize) -> usize {
        let f = std::mem::size_of::<f64>();
        match self {
            Kernel::MlstmRecurrent => MLstmState::<f64>::zeros(d).bytes(),
            Kernel::MlstmParallel => (2 * t * d + 2 * t) * f,
            Kernel::AttentionNaive => 2 * t * d * f,
            Kernel::Lstm => 2 * d * f,
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown kernel `{s}` (expected one of mlstm_recurrent, mlstm_parallel, attention_naive, lstm)")))
    }
}

/// Single-head unmasked softmax attention, one query row at a time.
/// `q`, `k`, `v` are `[t, d]`.
pub fn attention_naive(q: &[f64], k: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    let t = q.len() / d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut scores = vec![0.0; t];
    for i in 0..t {
        let qi = &q[i * d..(i + 1) * d];
        let mut mx = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = scale
                * qi.iter()
                    .zip(&k[j * d..(j + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            mx = mx.max(*s);
        }
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - mx).exp();
            z += *s;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, s) in scores.iter().enumerate() {
            let p = s / z;
            for (o, vv) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o += p * vv;
            }
        }
    }
    out
}

struct Inputs {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    o: Vec<f64>,
    i_pre: Vec<f64>,
    f_pre: Vec<f64>,
    wx: Vec<f64>,
    wh: Vec<f64>,
    bias: Vec<f64>,
}

impl Inputs {
    fn new(t: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normals = |n: usize, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    std * z
                })
                .collect()
        };
        let ks = 1.0 / (d as f64).sqrt();
        let q = normals(t * d, 1.0);
        let k = normals(t * d, ks);
        let v = normals(t * d, 1.0);
        let o = normals(t * d, 1.0);
        let i_pre = normals(t, 1.0);
        let f_pre = normals(t, 1.0)
            .into_iter()
            .map(|g| log_sigmoid(3.0 + g))
            .collect();
        let wx = normals(d * 4 * d, ks);
        let wh = normals(d * 4 * d, ks);
        let bias = vec![0.0; 4 * d];
        Self {
            q,
            k,
            v,
            o,
            i_pre,
            f_pre,
            wx,
            wh,
            bias,
        }
    }

    fn run(&self, kernel: Kernel, t: usize, d: usize) -> Result<f64> {
        let dims = (1, t, d);
        let mode = GatingMode::Exponential;
        let out = match kernel {
            Kernel::MlstmRecurrent => recurrent_sequence(
                &self.q,
                &self.k,
                &self.v,
                &self.i_pre,
                &self.f_pre,
                &self.o,
                dims,
                mode,
            )?,
            Kernel::MlstmParallel => parallel_raw(
                &self.q,
                &self.k,
                &self.v,
                &self.i_pre,
                &self.f_pre,
                &self.o,
                dims,
                mode,
            ),
            Kernel::AttentionNaive => attention_naive(&self.q, &self.k, &self.v, d),
            Kernel::Lstm => lstm_sequence_raw(&self.q, &self.wx, &self.wh, &self.bias, d),
        };
        Ok(out[out.len() - 1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub kernels: Vec<Kernel>,
    pub seq_lens: Vec<usize>,
    pub d: usize,
    pub reps: usize,
    pub seed: u64,
    /// Worker threads for kernels that can use them; 1 for stable timings.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            kernels: Kernel::ALL.to_vec(),
            seq_lens: DEFAULT_SEQ_LENS.to_vec(),
            d: DEFAULT_WIDTH,
            reps: MIN_REPS,
            seed: 0,
            threads: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::Config("no kernels selected".into()));
        }
        if self.reps < MIN_REPS {
            return Err(Error::Config(format!(
                "reps must be at least {MIN_REPS}, got {}",
                self.reps
            )));
        }
        if self.d == 0 || self.threads == 0 {
            return Err(Error::Config(
                "width and thread count must be positive".into(),
            ));
        }
        let mut lens = self.seq_lens.clone();
        lens.sort_unstable();
        lens.dedup();
        if lens.len() < 4 || lens[0] == 0 {
            return Err(Error::Config(format!(
                "need at least 4 distinct positive sequence lengths, got {:?}",
                self.seq_lens
            )));
        }
        if lens[lens.len() - 1] < 16 * lens[0] {
            return Err(Error::Config(format!(
                "sequence lengths must span at least 16x, got {:?}",
                self.seq_lens
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRun {
    pub kernel: Kernel,
    pub seq_len: usize,
    pub d: usize,
    pub reps: usize,
    /// Kernel calls per timed sample.
    pub inner: usize,
    pub median_s: f64,
    pub iqr_s: f64,
    pub state_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub runs: Vec<BenchRun>,
    pub slopes: Vec<(Kernel, f64)>,
    pub threads: usize,
}

impl BenchReport {
    pub fn slope(&self, k: Kernel) -> Option<f64> {
        self.slopes.iter().find(|(kk, _)| *kk == k).map(|(_, s)| *s)
    }

    /// `slope(attention) - slope(recurrent mLSTM)`, when both were run.
    pub fn separation(&self) -> Option<f64> {
        Some(self.slope(Kernel::AttentionNaive)? - self.slope(Kernel::MlstmRecurrent)?)
    }

    pub fn runs_of(&self, k: Kernel) -> impl Iterator<Item = &BenchRun> {
        self.runs.iter().filter(move |r| r.kernel == k)
    }
}

/// Linear interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Contract(format!(
            "log-log fit needs two or more positive points, got {points:?}"
        )));
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract(
            "log-log fit needs distinct x values".into(),
        ));
    }
    Ok(sxy / sxx)
}

fn time_kernel(
    inputs: &Inputs,
    kernel: Kernel,
    t: usize,
    d: usize,
    reps: usize,
) -> Result<(Vec<f64>, usize)> {
    let mut sink = 0.0;
    let mut slowest = Duration::ZERO;
    for _ in 0..WARMUP {
        let start = Instant::now();
        sink += inputs.run(kernel, t, d)?;
        slowest = slowest.max(start.elapsed());
    }
    let inner = if slowest >= MIN_SAMPLE {
        1
    } else {
        (MIN_SAMPLE.as_secs_f64() / slowest.as_secs_f64().max(1e-9)).ceil() as usize
    };
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for _ in 0..inner {
            sink += inputs.run(kernel, t, d)?;
        }
        samples.push(start.elapsed().as_secs_f64() / inner as f64);
    }
    std::hint::black_box(sink);
    Ok((samples, inner))
}

fn bench_all(cfg: &BenchConfig) -> Result<BenchReport> {
    let mut lens = cfg.seq_lens.clone();
    lens.sort_unstable();
    lens.dedup();
    let mut runs = Vec::new();
    for &t in &lens {
        let inputs = Inputs::new(t, cfg.d, cfg.seed);
        for &kernel in &cfg.kernels {
            let (mut samples, inner) = time_kernel(&inputs, kernel, t, cfg.d, cfg.reps)?;
            samples.sort_by(f64::total_cmp);
            let run = BenchRun {
                kernel,
                seq_len: t,
                d: cfg.d,
                reps: cfg.reps,
                inner,
                median_s: quantile(&samples, 0.5),
                iqr_s: quantile(&samples, 0.75) - quantile(&samples, 0.25),
                state_bytes: kernel.state_bytes(t, cfg.d),
            };
            log::info!(
                "{kernel} T={t}: median {:.3e} s, iqr {:.1e} s ({inner} calls per sample)",
                run.median_s,
                run.iqr_s
            );
            runs.push(run);
        }
    }
    runs.sort_by_key(|r| (r.kernel, r.seq_len));
    let mut slopes = Vec::new();
    for &kernel in &cfg.kernels {
        let pts: Vec<(f64, f64)> = runs
            .iter()
            .filter(|r| r.kernel == kernel)
            .map(|r| (r.seq_len as f64, r.median_s))
            .collect();
        slopes.push((kernel, loglog_slope(&pts)?));
    }
    Ok(BenchReport {
        runs,
        slopes,
        threads: cfg.threads,
    })
}

/// Times every kernel at every length, in a dedicated pool of
/// `cfg.threads` workers.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| bench_all(cfg))
}

/// One CSV row per run with the kernel's fitted slope repeated.
pub fn to_csv(report: &BenchReport) -> Result<String> {
    if report.runs.is_empty() {
        return Err(Error::Contract("benchmark report has no runs".into()));
    }
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.runs {
        let slope = report
            .slope(r.kernel)
            .ok_or_else(|| Error::Contract(format!("no slope for {}", r.kernel)))?;
        out.push_str(&format!(
            "{},{},{},{:e},{:e},{},{:e}\n",
            r.kernel, r.seq_len, r.d, r.median_s, r.iqr_s, r.state_bytes, slope
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub kernel: Kernel,
    pub seq_len: usize,
    pub d: usize,
    pub median_s: f64,
    pub iqr_s: f64,
    pub state_bytes: usize,
    pub slope: f64,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Config(format!(
            "benchmark CSV must start with `{CSV_HEADER}`"
        )));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad =
                |what: &str| Error::Config(format!("CSV row {}: bad {what} in `{line}`", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad("field count"));
            }
            Ok(CsvRow {
                kernel: f[0].parse()?,
                seq_len: f[1].parse().map_err(|_| bad("T"))?,
                d: f[2].parse().map_err(|_| bad("d"))?,
                median_s: f[3].parse().map_err(|_| bad("median_s"))?,
                iqr_s: f[4].parse().map_err(|_| bad("iqr_s"))?,
                state_bytes: f[5].parse().map_err(|_| bad("state_bytes"))?,
                slope: f[6].parse().map_err(|_| bad("slope"))?,
            })
        })
        .collect()
}

/// Slope of each kernel fitted again from CSV rows.
pub fn refit(rows: &[CsvRow]) -> Result<Vec<(Kernel, f64)>> {
    let mut kernels: Vec<Kernel> = rows.iter().map(|r| r.kernel).collect();
    kernels.sort();
    kernels.dedup();
    kernels
        .into_iter()
        .map(|k| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.kernel == k)
                .map(|r| (r.seq_len as f64, r.median_s))
                .collect();
            Ok((k, loglog_slope(&pts)?))
        })
        .collect()
}

/// Fixed-width table of the runs followed by the slopes.
pub fn table(report: &BenchReport) -> String {
    let mut s = format!(
        "{:<16} {:>6} {:>4} {:>12} {:>11} {:>12}\n",
        "kernel", "T", "d", "median [s]", "iqr [s]", "state [B]"
    );
    for r in &report.runs {
        s.push_str(&format!(
            "{:<16} {:>6} {:>4} {:>12.4e} {:>11.2e} {:>12}\n",
            r.kernel.name(),
            r.seq_len,
            r.d,
            r.median_s,
            r.iqr_s,
            r.state_bytes
        ));
    }
    for (k, slope) in &report.slopes {
        s.push_str(&format!("slope {:<16} {slope:.3}\n", k.name()));
    }
    if let Some(sep) = report.separation() {
        s.push_str(&format!(
            "separation (attention - mlstm_recurrent) {sep:.3}\n"
        ));
    }
    s
}
