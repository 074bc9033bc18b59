use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use rgdesk::bench::{emit_csv, plot_path, plot_svg, run_sweep, BenchSpec};
use rgdesk::chatfmt::{decode_bytes, encode_text, format_dialogue, parse_dialogue_lines, BOS};
use rgdesk::checkpoint::{checkpoint_from_bytes, peek_config, save_checkpoint};
use rgdesk::config::{count_params_for, Arch, Dtype, ModelConfig};
use rgdesk::engine::{generate, GenerationRequest, SamplerSpec};
use rgdesk::layers::ModelParams;
use rgdesk::numerics::Scalar;
use rgdesk::state::state_bytes;
use rgdesk::training::{batch_backward, corpus_sequences, AdamW, DecayMask, OptimizerConfig};

#[derive(Parser)]
#[command(
    name = "rgdesk",
    version,
    about = "Desk-scale recurrent language model toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ModelSource {
    /// Named preset: rg2b, rg9b or desk.
    #[arg(long)]
    preset: Option<String>,
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelSource {
    fn load(&self) -> anyhow::Result<ModelConfig> {
        match (&self.preset, &self.config) {
            (Some(p), _) => Ok(ModelConfig::preset_named(p)?),
            (None, Some(path)) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                Ok(ModelConfig::from_text(&text)?)
            }
            (None, None) => bail!("one of --preset or --config is required"),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the parameter audit for a model configuration.
    CountParams {
        #[command(flatten)]
        model: ModelSource,
        #[arg(long, default_value = "recurrent")]
        arch: Arch,
    },
    /// Train a desk model on a text file and write a checkpoint.
    TrainToy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Tokens per training sequence.
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        /// Sequences per step.
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Config file; the desk preset when absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Continue a prompt with a trained checkpoint.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        /// greedy, temperature:T, top_k:K or top_k:K:T
        #[arg(long, default_value = "greedy")]
        sampler: SamplerSpec,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Token ids that end generation.
        #[arg(long = "stop", value_delimiter = ',')]
        stop: Vec<u32>,
    },
    /// Render a `role:<TAB>text` dialogue file in the turn format.
    ChatFormat {
        /// Dialogue file, or `-` for standard input.
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Measure decode and prompt throughput and write a CSV report.
    Bench {
        /// recurrent, baseline or both.
        #[arg(long, default_value = "both")]
        arch: String,
        /// Bench spec file; desk defaults when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        csv_out: PathBuf,
        /// Also write an SVG plot next to the CSV.
        #[arg(long)]
        plot: bool,
        /// Run each arch on its own thread.
        #[arg(long)]
        parallel: bool,
    },
    /// Print the closed-form inference state size in bytes.
    StateBytes {
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        tokens: u64,
        #[arg(long, default_value = "recurrent")]
        arch: Arch,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    let mut out = io::stdout().lock();
    match command {
        Command::CountParams { model, arch } => {
            let cfg = model.load()?;
            write!(out, "{}", count_params_for(&cfg, arch))?;
        }
        Command::StateBytes {
            model,
            tokens,
            arch,
        } => {
            let cfg = model.load()?;
            writeln!(out, "{}", state_bytes(&cfg, arch, tokens))?;
        }
        Command::ChatFormat { input } => {
            let text = read_input(&input)?;
            let dialogue = parse_dialogue_lines(&text)?;
            write!(out, "{}", format_dialogue(&dialogue)?)?;
        }
        Command::TrainToy {
            data,
            steps,
            out: ckpt,
            seq_len,
            batch,
            lr,
            seed,
            config,
        } => {
            let cfg = match config {
                Some(path) => ModelConfig::from_text(&fs::read_to_string(&path)?)?,
                None => ModelConfig::preset(rgdesk::config::Preset::Desk),
            };
            let text =
                fs::read_to_string(&data).with_context(|| format!("reading {}", data.display()))?;
            let seqs = corpus_sequences(&text, seq_len)?;
            let opt = OptimizerConfig {
                learning_rate: lr,
                ..OptimizerConfig::default()
            };
            match cfg.dtype {
                Dtype::F32 => {
                    train_toy::<f32>(&cfg, &seqs, steps, batch, opt, seed, &ckpt, &mut out)?
                }
                Dtype::F64 => {
                    train_toy::<f64>(&cfg, &seqs, steps, batch, opt, seed, &ckpt, &mut out)?
                }
            }
        }
        Command::Generate {
            ckpt,
            prompt,
            max_new,
            sampler,
            seed,
            stop,
        } => {
            let bytes = fs::read(&ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
            let sampler = sampler.with_seed(seed);
            let mut ids = vec![BOS];
            ids.extend(encode_text(&prompt));
            let continuation = match peek_config(&bytes)?.dtype {
                Dtype::F32 => generate_with::<f32>(&bytes, ids, max_new, sampler, stop)?,
                Dtype::F64 => generate_with::<f64>(&bytes, ids, max_new, sampler, stop)?,
            };
            out.write_all(&decode_bytes(&continuation)?)?;
        }
        Command::Bench {
            arch,
            spec,
            csv_out,
            plot,
            parallel,
        } => {
            let base = match spec {
                Some(path) => BenchSpec::from_text(&fs::read_to_string(&path)?)?,
                None => BenchSpec::desk(Arch::Recurrent),
            };
            let archs = match arch.as_str() {
                "both" => vec![Arch::Recurrent, Arch::GlobalBaseline],
                one => vec![one.parse::<Arch>()?],
            };
            let specs: Vec<BenchSpec> = archs
                .into_iter()
                .map(|arch| BenchSpec {
                    arch,
                    ..base.clone()
                })
                .collect();
            let report = run_sweep(&specs, parallel)?;
            emit_csv(&report, &csv_out)
                .with_context(|| format!("writing {}", csv_out.display()))?;
            if plot {
                let svg = plot_path(&csv_out);
                fs::write(&svg, plot_svg(&report)?)
                    .with_context(|| format!("writing {}", svg.display()))?;
                eprintln!("plot written to {}", svg.display());
            }
            write!(out, "{}", report.to_csv()?)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_input(path: &Path) -> anyhow::Result<String> {
    if path.as_os_str() == "-" {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
    }
}

#[allow(clippy::too_many_arguments)]
fn train_toy<F: Scalar>(
    cfg: &ModelConfig,
    seqs: &[Vec<u32>],
    steps: usize,
    batch: usize,
    opt: OptimizerConfig,
    seed: u64,
    ckpt: &Path,
    out: &mut impl Write,
) -> anyhow::Result<()> {
    if batch == 0 {
        bail!("--batch must be at least 1");
    }
    let mut params = ModelParams::<F>::init(cfg, Arch::Recurrent, seed)?;
    let mask = DecayMask::for_params(&params);
    let mut adam = AdamW::new(&params, opt)?;
    for step in 0..steps {
        let chunk: Vec<Vec<u32>> = (0..batch)
            .map(|j| seqs[(step * batch + j) % seqs.len()].clone())
            .collect();
        let (loss, grads) = batch_backward(&params, &chunk)?;
        adam.step(&mut params, &grads, &mask)?;
        writeln!(out, "step {step} loss {:.6}", loss.as_f64())?;
    }
    save_checkpoint(ckpt, &params, &mask)?;
    eprintln!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn generate_with<F: Scalar>(
    bytes: &[u8],
    prompt: Vec<u32>,
    max_new: usize,
    sampler: SamplerSpec,
    stop: Vec<u32>,
) -> anyhow::Result<Vec<u32>> {
    let (params, _) = checkpoint_from_bytes::<F>(bytes)?;
    let request = GenerationRequest::new(prompt, max_new)
        .sampler(sampler)
        .stop_ids(stop);
    Ok(generate(&params, request)?)
}
