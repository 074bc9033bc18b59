//! Throughput and state-size benchmarks against the global-attention
//! baseline.
//!
//! Decode runs time only the sampling loop: the prompt is processed before the
//! clock starts and tokens are never detokenized. One decode run goes to the
//! largest requested generation length and records the elapsed time as it
//! passes each shorter one; greedy decoding makes every prefix of that run
//! identical to a separate run of the shorter length. Each reported figure is
//! the median over `repeats` runs that follow `warmup` discarded ones.
//!
//! `peak_state_bytes` is per sequence: the closed-form [`state_bytes`] after
//! `prompt_len + gen_len` tokens, checked against the live state of every
//! lane when the run passes that point.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Arch, Dtype, ModelConfig, Preset};
use crate::engine::{argmax, decode_batch, process_prompts};
use crate::error::{Error, Result};
use crate::layers::ModelParams;
use crate::numerics::Scalar;
use crate::state::{state_bytes, InferenceState};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub arch: Arch,
    pub config: ModelConfig,
    pub prompt_len: usize,
    pub gen_lens: Vec<usize>,
    pub prompt_lens: Vec<usize>,
    pub batch: usize,
    pub repeats: usize,
    pub warmup: usize,
    /// Seeds the parameters and the prompt tokens.
    pub seed: u64,
}

impl BenchSpec {
    /// Desk defaults: prompt 256, generation lengths 256/1024/4096, window 8,
    /// batch 16.
    pub fn desk(arch: Arch) -> Self {
        BenchSpec {
            arch,
            config: ModelConfig::preset(Preset::Desk),
            prompt_len: 256,
            gen_lens: vec![256, 1024, 4096],
            prompt_lens: vec![8, 64, 256, 1024],
            batch: 16,
            repeats: 3,
            warmup: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("bench: {msg}")));
        self.config.validate()?;
        if self.repeats < 3 {
            return bad("repeats must be at least 3");
        }
        if self.warmup < 1 {
            return bad("warmup must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if self.prompt_len == 0 {
            return bad("prompt_len must be at least 1");
        }
        if self.prompt_lens.contains(&0) {
            return bad("prompt lengths must be at least 1");
        }
        Ok(())
    }

    /// Parses `key = value` lines over the desk defaults. Keys: `arch`,
    /// `preset`, `attention_window`, `prompt_len`, `gen_lens`, `prompt_lens`,
    /// `batch`, `repeats`, `warmup`, `seed`. Lists are comma separated.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = BenchSpec::desk(Arch::Recurrent);
        let mut window = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| Error::ConfigParse { line, msg };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let int = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|e| err(format!("`{key}`: {e}")))
            };
            let list = |v: &str| -> Result<Vec<usize>> {
                v.split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(int)
                    .collect()
            };
            match key {
                "arch" => spec.arch = value.parse().map_err(|e: Error| err(e.to_string()))?,
                "preset" => {
                    let preset: Preset = value.parse().map_err(|e: Error| err(e.to_string()))?;
                    spec.config = ModelConfig::preset(preset);
                }
                "attention_window" | "window" => window = Some(int(value)?),
                "prompt_len" => spec.prompt_len = int(value)?,
                "gen_lens" => spec.gen_lens = list(value)?,
                "prompt_lens" => spec.prompt_lens = list(value)?,
                "batch" => spec.batch = int(value)?,
                "repeats" => spec.repeats = int(value)?,
                "warmup" => spec.warmup = int(value)?,
                "seed" => spec.seed = value.parse().map_err(|e| err(format!("`seed`: {e}")))?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        if let Some(w) = window {
            spec.config.attention_window = w;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BenchMode {
    Decode,
    Prompt,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Decode => "decode",
            BenchMode::Prompt => "prompt",
        }
    }
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decode" => Ok(BenchMode::Decode),
            "prompt" => Ok(BenchMode::Prompt),
            other => Err(Error::Domain(format!("unknown bench mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub arch: Arch,
    pub mode: BenchMode,
    pub prompt_len: usize,
    /// Zero for prompt rows.
    pub gen_len: usize,
    pub batch: usize,
    pub tokens_per_sec: f64,
    pub peak_state_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

pub const CSV_HEADER: &str = "arch,mode,prompt_len,gen_len,batch,tokens_per_sec,peak_state_bytes";

impl BenchReport {
    pub fn extend(&mut self, other: BenchReport) {
        self.rows.extend(other.rows);
    }

    /// Rows ordered by arch, mode, lengths and batch.
    pub fn sorted(&self) -> Vec<&BenchRow> {
        let mut rows: Vec<&BenchRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| (r.arch.name(), r.mode, r.prompt_len, r.gen_len, r.batch));
        rows
    }

    pub fn find(
        &self,
        arch: Arch,
        mode: BenchMode,
        prompt_len: usize,
        gen_len: usize,
    ) -> Option<&BenchRow> {
        self.rows.iter().find(|r| {
            r.arch == arch && r.mode == mode && r.prompt_len == prompt_len && r.gen_len == gen_len
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        if self.rows.is_empty() {
            return Err(Error::Empty("bench report"));
        }
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.sorted() {
            writeln!(
                out,
                "{},{},{},{},{},{:.1},{}",
                r.arch.name(),
                r.mode.name(),
                r.prompt_len,
                r.gen_len,
                r.batch,
                r.tokens_per_sec,
                r.peak_state_bytes
            )
            .expect("write to string");
        }
        Ok(out)
    }

    /// Parses what [`BenchReport::to_csv`] writes.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Domain("bench csv: missing header".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Domain(format!("bench csv: bad row {}", i + 2));
            if f.len() != 7 {
                return Err(bad());
            }
            rows.push(BenchRow {
                arch: f[0].parse().map_err(|_| bad())?,
                mode: f[1].parse().map_err(|_| bad())?,
                prompt_len: f[2].parse().map_err(|_| bad())?,
                gen_len: f[3].parse().map_err(|_| bad())?,
                batch: f[4].parse().map_err(|_| bad())?,
                tokens_per_sec: f[5].parse().map_err(|_| bad())?,
                peak_state_bytes: f[6].parse().map_err(|_| bad())?,
            });
        }
        Ok(BenchReport { rows })
    }
}

pub fn emit_csv(report: &BenchReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_csv()?)?;
    Ok(())
}

/// The comparison model: every block is attention with an unbounded window,
/// so its state grows with every token.
pub fn build_baseline<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    ModelParams::init(config, Arch::GlobalBaseline, seed)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn prompts(spec: &BenchSpec, len: usize) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let vocab = spec.config.vocab_size as u32;
    (0..spec.batch)
        .map(|_| (0..len).map(|_| rng.random_range(0..vocab)).collect())
        .collect()
}

fn check_bytes<F: Scalar>(states: &[InferenceState<F>], expected: u64) -> Result<()> {
    for s in states {
        if s.logical_bytes() as u64 != expected {
            return Err(Error::Domain(format!(
                "state holds {} bytes after {} tokens, closed form says {expected}",
                s.logical_bytes(),
                s.tokens_processed
            )));
        }
    }
    Ok(())
}

/// One greedy decode run to the largest generation length. Returns the
/// elapsed seconds at each of `marks` (ascending).
fn decode_run<F: Scalar>(
    spec: &BenchSpec,
    params: &ModelParams<F>,
    prompts: &[Vec<u32>],
    marks: &[usize],
    check: bool,
) -> Result<Vec<f64>> {
    let refs: Vec<&[u32]> = prompts.iter().map(|p| p.as_slice()).collect();
    let (mut states, logits): (Vec<InferenceState<F>>, Vec<Vec<F>>) =
        process_prompts(params, &refs)?.into_iter().unzip();
    let mut tokens: Vec<u32> = logits.iter().map(|l| argmax(l)).collect();
    let last = marks.last().copied().unwrap_or(0);
    let mut times = Vec::with_capacity(marks.len());
    let mut next = marks.iter().peekable();
    let start = Instant::now();
    for step in 1..=last {
        let logits = {
            let mut lanes: Vec<&mut InferenceState<F>> = states.iter_mut().collect();
            decode_batch(params, &mut lanes, &tokens)?
        };
        for (i, t) in tokens.iter_mut().enumerate() {
            *t = argmax(logits.row(i));
        }
        if next.peek() == Some(&&step) {
            times.push(start.elapsed().as_secs_f64());
            next.next();
            if check {
                let total = (spec.prompt_len + step) as u64;
                check_bytes(&states, state_bytes(&spec.config, spec.arch, total))?;
            }
        }
    }
    Ok(times)
}

fn params_for<F: Scalar>(spec: &BenchSpec) -> Result<ModelParams<F>> {
    match spec.arch {
        Arch::Recurrent => ModelParams::init(&spec.config, Arch::Recurrent, spec.seed),
        Arch::GlobalBaseline => build_baseline(&spec.config, spec.seed),
    }
}

fn decode_bench_as<F: Scalar>(spec: &BenchSpec) -> Result<BenchReport> {
    let params = params_for::<F>(spec)?;
    let mut marks: Vec<usize> = spec.gen_lens.iter().copied().filter(|&g| g > 0).collect();
    marks.sort_unstable();
    marks.dedup();
    if marks.is_empty() {
        return Ok(BenchReport::default());
    }
    let prompts = prompts(spec, spec.prompt_len);
    let warm = [marks[0].min(32)];
    for _ in 0..spec.warmup {
        decode_run(spec, &params, &prompts, &warm, false)?;
    }
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); marks.len()];
    for r in 0..spec.repeats {
        let times = decode_run(spec, &params, &prompts, &marks, r == 0)?;
        for ((s, &t), &g) in samples.iter_mut().zip(&times).zip(&marks) {
            s.push((spec.batch * g) as f64 / t);
        }
    }
    Ok(BenchReport {
        rows: marks
            .iter()
            .zip(samples)
            .map(|(&g, s)| BenchRow {
                arch: spec.arch,
                mode: BenchMode::Decode,
                prompt_len: spec.prompt_len,
                gen_len: g,
                batch: spec.batch,
                tokens_per_sec: median(s),
                peak_state_bytes: state_bytes(
                    &spec.config,
                    spec.arch,
                    (spec.prompt_len + g) as u64,
                ),
            })
            .collect(),
    })
}

fn prompt_bench_as<F: Scalar>(spec: &BenchSpec) -> Result<BenchReport> {
    let params = params_for::<F>(spec)?;
    let mut report = BenchReport::default();
    for &len in &spec.prompt_lens {
        let prompts = prompts(spec, len);
        let refs: Vec<&[u32]> = prompts.iter().map(|p| p.as_slice()).collect();
        for _ in 0..spec.warmup {
            process_prompts(&params, &refs)?;
        }
        let mut samples = Vec::with_capacity(spec.repeats);
        for r in 0..spec.repeats {
            let start = Instant::now();
            let out = process_prompts(&params, &refs)?;
            let elapsed = start.elapsed().as_secs_f64();
            samples.push((spec.batch * len) as f64 / elapsed);
            if r == 0 {
                let states: Vec<InferenceState<F>> = out.into_iter().map(|(s, _)| s).collect();
                check_bytes(&states, state_bytes(&spec.config, spec.arch, len as u64))?;
            }
        }
        report.rows.push(BenchRow {
            arch: spec.arch,
            mode: BenchMode::Prompt,
            prompt_len: len,
            gen_len: 0,
            batch: spec.batch,
            tokens_per_sec: median(samples),
            peak_state_bytes: state_bytes(&spec.config, spec.arch, len as u64),
        });
    }
    Ok(report)
}

/// Decode throughput at each generation length from a fixed prompt.
/// Generation lengths of zero produce no row.
pub fn run_decode_bench(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    match spec.config.dtype {
        Dtype::F32 => decode_bench_as::<f32>(spec),
        Dtype::F64 => decode_bench_as::<f64>(spec),
    }
}

/// Prompt-processing throughput at each of `prompt_lens`.
pub fn run_prompt_bench(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    match spec.config.dtype {
        Dtype::F32 => prompt_bench_as::<f32>(spec),
        Dtype::F64 => prompt_bench_as::<f64>(spec),
    }
}

/// Decode then prompt rows for one spec.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    let mut report = run_decode_bench(spec)?;
    report.extend(run_prompt_bench(spec)?);
    Ok(report)
}

/// Runs several specs, one after another or, with `parallel`, one thread per
/// spec. Parallel runs share the machine, so their figures are only
/// comparable with each other when cores are plentiful.
pub fn run_sweep(specs: &[BenchSpec], parallel: bool) -> Result<BenchReport> {
    let reports: Vec<Result<BenchReport>> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = specs
                .iter()
                .map(|s| scope.spawn(move || run_bench(s)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("bench thread panicked"))
                .collect()
        })
    } else {
        specs.iter().map(run_bench).collect()
    };
    let mut out = BenchReport::default();
    for r in reports {
        out.extend(r?);
    }
    Ok(out)
}

/// Line plot of decode tokens/sec against generation length, one series per
/// arch, with a log-scaled x axis.
pub fn plot_svg(report: &BenchReport) -> Result<String> {
    let rows: Vec<&BenchRow> = report
        .sorted()
        .into_iter()
        .filter(|r| r.mode == BenchMode::Decode)
        .collect();
    if rows.is_empty() {
        return Err(Error::Empty("bench report has no decode rows"));
    }
    let (w, h, m) = (640.0, 400.0, 60.0);
    let xs: Vec<f64> = rows.iter().map(|r| (r.gen_len as f64).log2()).collect();
    let (x0, x1) = xs
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
    let y1 = rows.iter().map(|r| r.tokens_per_sec).fold(0.0, f64::max) * 1.1;
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - y / y1 * (h - 2.0 * m);
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    )
    .expect("write to string");
    writeln!(
        svg,
        r#"<rect width="{w}" height="{h}" fill="white"/><line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>"#,
        b = h - m,
        r = w - m
    )
    .expect("write to string");
    writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">generated tokens</text><text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">tokens/sec</text>"#,
        w / 2.0,
        h - 15.0,
        h / 2.0,
        h / 2.0
    )
    .expect("write to string");
    for (i, arch) in [Arch::Recurrent, Arch::GlobalBaseline]
        .into_iter()
        .enumerate()
    {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.arch == arch)
            .map(|r| (px((r.gen_len as f64).log2()), py(r.tokens_per_sec)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let color = ["#1f77b4", "#d62728"][i];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        )
        .expect("write to string");
        writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - m - 80.0,
            m + 16.0 * i as f64,
            arch.name()
        )
        .expect("write to string");
    }
    for r in rows.iter().filter(|r| r.arch == rows[0].arch) {
        let x = px((r.gen_len as f64).log2());
        writeln!(
            svg,
            r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#,
            h - m + 16.0,
            r.gen_len
        )
        .expect("write to string");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// `report.csv` → `report.svg`.
pub fn plot_path(csv: &Path) -> PathBuf {
    csv.with_extension("svg")
}
