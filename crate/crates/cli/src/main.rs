//! `cascade`: train, distill, evaluate and benchmark the cascaded
//! transducer from the command line.
//!
//! Structured results are emitted as line-delimited JSON (to a file when a
//! report path is given, otherwise to stdout); human-readable summary tables
//! always go to stdout.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cascade_core::bench::benchmark_latency;
use cascade_core::checkpoint::{load_checkpoint, save_checkpoint};
use cascade_core::compress::{analytic_breakdown, compress_config};
use cascade_core::config::ExperimentConfig;
use cascade_core::data::{load_dataset, write_dataset, Dataset, SynthTaskSpec};
use cascade_core::decode::DecodeMode;
use cascade_core::error::Error;
use cascade_core::eval::evaluate;
use cascade_core::model::CascadedModel;
use cascade_core::rng::derive_seed;
use cascade_core::train::{train_model, StepMetrics};

#[derive(Parser)]
#[command(name = "cascade", version, about = "Cascaded transducer experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest + per-utterance feature files)
    DataGen(DataGenArgs),
    /// Train a model from scratch
    Train(TrainArgs),
    /// Train a student against a frozen teacher checkpoint
    Distill(DistillArgs),
    /// Decode a dataset and report token error rates
    Eval(EvalArgs),
    /// Measure first/second-pass wall-clock latency and xRT
    Bench(BenchArgs),
    /// Report parameter counts by component
    Params(ParamsArgs),
    /// Derive a compressed model config hitting a target size reduction
    CompressConfig(CompressArgs),
}

#[derive(Args)]
struct DataGenArgs {
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Number of utterances
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Vocabulary size including blank id 0
    #[arg(long, default_value_t = 16)]
    vocab_size: usize,
    /// Feature width per frame
    #[arg(long, default_value_t = 8)]
    feat_dim: usize,
    /// Frames emitted per token
    #[arg(long, default_value_t = 4)]
    frames_per_token: usize,
    /// Gaussian feature noise
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    /// Seed fixing the per-token prototype patterns
    #[arg(long, default_value_t = 7)]
    prototype_seed: u64,
    #[arg(long, default_value_t = 2)]
    min_tokens: usize,
    #[arg(long, default_value_t = 8)]
    max_tokens: usize,
    /// Flip each transcript token with this probability to a random other
    /// label (features untouched); models noisy training transcripts
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    /// Sampling seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Dataset manifest path
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Per-step metrics JSONL path (stdout when omitted)
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

/// Flags that override keys from the `[train]` config table.
#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    log_every: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.steps {
            t.steps = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.dropout {
            t.dropout = v;
        }
        if let Some(v) = self.log_every {
            t.log_every = v;
        }
    }
}

#[derive(Args)]
struct DistillArgs {
    /// Student experiment config (TOML, must contain [train.kd])
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Frozen teacher checkpoint
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Copy, Clone, ValueEnum)]
enum ModeArg {
    /// Causal encoder only (first pass)
    Streaming,
    /// Full cascade (second pass)
    Nonstreaming,
}

impl From<ModeArg> for DecodeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Streaming => DecodeMode::Streaming,
            ModeArg::Nonstreaming => DecodeMode::Nonstreaming,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Nonstreaming)]
    mode: ModeArg,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Per-utterance JSONL report path (stdout when omitted)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Accepted for interface uniformity; evaluation is deterministic
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Report JSONL path (stdout when omitted)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Accepted for interface uniformity; the benchmark is input-driven
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ParamsArgs {
    /// Experiment config (TOML); counts are computed from the architecture
    #[arg(long, conflicts_with = "model")]
    config: Option<PathBuf>,
    /// Checkpoint; counts are taken from the stored tensors
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct CompressArgs {
    /// Base experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Target total-parameter reduction in percent, 0 <= f < 90
    #[arg(long)]
    factor: f64,
    /// Output path for the compressed config (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// JSONL sink: a file when a path is given, stdout otherwise.
fn jsonl_sink(path: &Option<PathBuf>) -> std::io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run_training(
    mut cfg: ExperimentConfig,
    args_data: &PathBuf,
    out: &PathBuf,
    metrics: &Option<PathBuf>,
    overrides: &TrainOverrides,
    teacher: Option<&CascadedModel>,
) -> Result<(), Error> {
    overrides.apply(&mut cfg);
    let dataset = load_dataset(args_data)?;
    let mut sink = jsonl_sink(metrics)?;
    let mut last: Option<StepMetrics> = None;
    let mut write_step = |m: &StepMetrics| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(sink, "{line}").expect("metrics write");
        last = Some(m.clone());
    };
    let model = train_model(&cfg, &dataset, teacher, &mut write_step)?;
    drop(write_step);
    save_checkpoint(&model, out)?;

    let b = model.count_params();
    println!("training complete: {} steps on {} utterances", cfg.train.steps, dataset.len());
    if let Some(m) = last {
        println!(
            "final step {}: loss {:.4} (causal {:.4}, noncausal {:.4}, kd {:.6})",
            m.step, m.loss, m.rnnt_causal, m.rnnt_noncausal, m.kd
        );
    }
    println!("parameters: {} total", b.total);
    println!("checkpoint: {}", out.display());
    Ok(())
}

fn cmd_data_gen(a: DataGenArgs) -> Result<(), Error> {
    let spec = SynthTaskSpec {
        vocab_size: a.vocab_size,
        feat_dim: a.feat_dim,
        frames_per_token: a.frames_per_token,
        noise_std: a.noise_std,
        prototype_seed: a.prototype_seed,
    };
    let mut ds = Dataset::synth(&spec, a.count, a.min_tokens, a.max_tokens, a.seed)?;
    let flipped = match a.label_noise {
        r if r > 0.0 => ds.corrupt_transcripts(r, derive_seed(a.seed, 0x1AB_E1))?,
        _ => 0,
    };
    let manifest = write_dataset(&ds, &a.out)?;
    let tokens: usize = ds.utterances.iter().map(|u| u.tokens.len()).sum();
    let frames: usize = ds.utterances.iter().map(|u| u.features.rows()).sum();
    let noise_note =
        if flipped > 0 { format!(", {flipped} tokens corrupted") } else { String::new() };
    println!(
        "wrote {} utterances ({} tokens, {} frames{}) to {}",
        ds.len(),
        tokens,
        frames,
        noise_note,
        manifest.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Error> {
    if a.seed.is_some() {
        eprintln!("note: --seed has no effect on eval; decoding is deterministic");
    }
    let model = load_checkpoint(&a.model)?;
    let dataset = load_dataset(&a.data)?;
    let report = evaluate(&model, &dataset, a.mode.into(), a.beam)?;

    let mut sink = jsonl_sink(&a.report)?;
    for u in &report.per_utterance {
        writeln!(sink, "{}", serde_json::to_string(u).expect("report serialize"))?;
    }
    let summary = serde_json::json!({
        "mode": report.mode,
        "beam": report.beam,
        "utterances": report.utterances,
        "reference_tokens": report.reference_tokens,
        "substitutions": report.counts.substitutions,
        "insertions": report.counts.insertions,
        "deletions": report.counts.deletions,
        "wer": report.wer,
    });
    writeln!(sink, "{summary}")?;
    drop(sink);

    println!("mode          beam  utts  ref-tokens  sub  ins  del     wer");
    println!(
        "{:<13} {:>4} {:>5} {:>11} {:>4} {:>4} {:>4} {:>7.2}%",
        format!("{:?}", report.mode).to_lowercase(),
        report.beam,
        report.utterances,
        report.reference_tokens,
        report.counts.substitutions,
        report.counts.insertions,
        report.counts.deletions,
        report.wer * 100.0
    );
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), Error> {
    if a.seed.is_some() {
        eprintln!("note: --seed has no effect on bench; timings are input-driven");
    }
    let model = load_checkpoint(&a.model)?;
    let dataset = load_dataset(&a.data)?;
    let report = benchmark_latency(&model, &dataset, a.repetitions, a.beam)?;

    let mut sink = jsonl_sink(&a.report)?;
    writeln!(sink, "{}", serde_json::to_string(&report).expect("report serialize"))?;
    drop(sink);

    println!("machine: {}", report.machine);
    println!(
        "{} utterances, {:.2}s audio, {} repetitions, beam {}",
        report.utterances, report.audio_seconds, report.repetitions, report.beam
    );
    println!("pass         median-ms      mad-ms       xRT");
    for (name, s) in [("first-pass", &report.first_pass), ("second-pass", &report.second_pass)] {
        println!("{:<12} {:>9.2} {:>11.2} {:>9.4}", name, s.median_ms, s.mad_ms, s.xrt);
    }
    Ok(())
}

fn print_breakdown(b: &cascade_core::model::ParamBreakdown) {
    println!("component           parameters");
    println!("causal encoder     {:>11}", b.causal_encoder);
    println!("non-causal encoder {:>11}", b.noncausal_encoder);
    println!("predictor          {:>11}", b.predictor);
    println!("joint              {:>11}", b.joint);
    println!("total              {:>11}", b.total);
}

fn cmd_params(a: ParamsArgs) -> Result<(), Error> {
    let breakdown = match (&a.config, &a.model) {
        (Some(cfg_path), None) => {
            let cfg = ExperimentConfig::from_path(cfg_path)?;
            analytic_breakdown(&cfg.model)
        }
        (None, Some(ckpt_path)) => load_checkpoint(ckpt_path)?.count_params(),
        _ => return Err(Error::usage("pass exactly one of --config or --model")),
    };
    println!("{}", serde_json::to_string(&breakdown).expect("breakdown serialize"));
    print_breakdown(&breakdown);
    Ok(())
}

fn cmd_compress(a: CompressArgs) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::from_path(&a.config)?;
    let spec = compress_config(&cfg.model, a.factor)?;
    cfg.model = spec.model.clone();
    let text = cfg.to_toml_string()?;
    match &a.out {
        Some(p) => {
            std::fs::write(p, &text)?;
            println!("wrote compressed config to {}", p.display());
        }
        None => print!("{text}"),
    }
    println!(
        "base {} -> target {} -> realized {} parameters ({:.2}% reduction, asked {:.2}%)",
        spec.base_total,
        spec.target_total,
        spec.realized_total,
        spec.realized_factor_percent,
        spec.factor_percent
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::DataGen(a) => cmd_data_gen(a),
        Command::Train(a) => {
            let cfg = ExperimentConfig::from_path(&a.config)?;
            run_training(cfg, &a.data, &a.out, &a.metrics, &a.overrides, None)
        }
        Command::Distill(a) => {
            let cfg = ExperimentConfig::from_path(&a.config)?;
            if cfg.train.kd.is_none() {
                return Err(Error::Config(
                    "distill requires a [train.kd] table in the config".into(),
                ));
            }
            let teacher = load_checkpoint(&a.teacher)?;
            run_training(cfg, &a.data, &a.out, &a.metrics, &a.overrides, Some(&teacher))
        }
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Params(a) => cmd_params(a),
        Command::CompressConfig(a) => cmd_compress(a),
    }
}

fn main() -> ExitCode {
    // die quietly on closed pipes (e.g. `cascade ... | head`)
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
