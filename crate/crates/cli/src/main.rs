//! `flowsynth` command-line front end.
//!
//! Exit codes: 0 on success, 2 for usage, config or input errors, 3 for
//! runtime or numerical failures.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use flowsynth::config::{hash_text, RunConfig};
use flowsynth::data::{
    benchmark_rtf, cross_modal_dependence, energy_distance, generate_corpus, load_corpus, marginal_configs,
    save_corpus, split_dataset, CorpusHeader, MarginalBaseline, ToyUtterance,
};
use flowsynth::persist::{write_atomic, Checkpoint};
use flowsynth::sampler::{synthesize, SamplerConfig, Synthesis};
use flowsynth::train::{align_dataset, MetricsRecord, Precision, TrainConfig, Trainer};
use flowsynth::{JointFrameSequence, Model, ModelConfig, Regime, Rng, Tensor};
use rayon::prelude::*;
use serde_json::json;

#[derive(Parser)]
#[command(name = "flowsynth", version, about = "Joint acoustic and motion synthesis on toy corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy corpus file.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `corpus.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `model.regime`.
        #[arg(long)]
        regime: Option<RegimeArg>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint up to `train.updates` total updates.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train a single-modality model for the marginal baseline.
        #[arg(long, value_enum, default_value_t = Modality::Joint)]
        modality: Modality,
        /// With `--modality motion`, train on the alignments of this acoustic-only checkpoint.
        #[arg(long)]
        align_ckpt: Option<PathBuf>,
        /// Metrics log path, JSON lines. Defaults to `<out>.metrics.jsonl`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Synthesize one utterance from a token string.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        /// Whitespace-separated token ids, e.g. "3 1 4 1 5".
        #[arg(long, allow_hyphen_values = true)]
        tokens: String,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corpus-format output; the sidecar goes to `<out>.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model, the marginal baseline, or raw data.
    Eval {
        /// Unified model. Omit for raw-data statistics.
        #[arg(long, conflicts_with = "marginal_ckpts")]
        ckpt: Option<PathBuf>,
        /// Acoustic-only and motion-only checkpoints.
        #[arg(long, num_args = 2, value_names = ["ACOUSTIC", "MOTION"])]
        marginal_ckpts: Option<Vec<PathBuf>>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        metric: Metric,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use at most this many utterances from `--data`.
        #[arg(long)]
        limit: Option<usize>,
        /// Step counts timed by the rtf metric.
        #[arg(long, value_delimiter = ',', default_value = "50,500")]
        rtf_steps: Vec<usize>,
        /// Timed runs per utterance for rtf; the fastest counts.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Otcfm,
    Sm,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Otcfm => Regime::Otcfm,
            RegimeArg::Sm => Regime::ScoreMatching,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Modality {
    Joint,
    Acoustic,
    Motion,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Xmodal,
    Energy,
    Rtf,
}

impl Metric {
    fn name(self) -> &'static str {
        match self {
            Metric::Xmodal => "xmodal",
            Metric::Energy => "energy",
            Metric::Rtf => "rtf",
        }
    }
}

/// Bad flags, config or input files.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

/// Turns a library error from reading user input into a usage error.
fn input<T>(r: flowsynth::Result<T>, what: impl fmt::Display) -> anyhow::Result<T> {
    r.map_err(|e| usage(format!("{what}: {e}")))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<flowsynth::Error>() {
        Some(flowsynth::Error::Config(_) | flowsynth::Error::Invalid(_)) => 2,
        _ => 3,
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("FLOWSYNTH_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("FLOWSYNTH_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("cannot start thread pool")
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => input(RunConfig::load(p), format!("config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_data(path: &Path) -> anyhow::Result<(CorpusHeader, Vec<ToyUtterance>)> {
    input(load_corpus(path), format!("data {}", path.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    input(Checkpoint::load(path), format!("checkpoint {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<(Model, Checkpoint)> {
    let ck = load_checkpoint(path)?;
    let model = input(ck.to_model(), format!("checkpoint {}", path.display()))?;
    Ok((model, ck))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("cannot write {}", path.display()))
}

fn parse_tokens(text: &str) -> anyhow::Result<Vec<u32>> {
    let tokens = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u32>().map_err(|_| usage(format!("token `{s}` is not a non-negative integer"))))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if tokens.is_empty() {
        return Err(usage("--tokens is empty"));
    }
    Ok(tokens)
}

fn check_vocab(tokens: &[u32], vocab: usize) -> anyhow::Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(t) => Err(usage(format!("token {t} is outside the vocabulary of {vocab}"))),
        None => Ok(()),
    }
}

fn cmd_generate_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let mut run = load_config(config)?;
    if let Some(s) = seed {
        run.corpus.seed = s;
    }
    let corpus = &run.corpus;
    let utts = generate_corpus(corpus, &Rng::new(corpus.seed, 0))?;
    let header = CorpusHeader {
        acoustic_dim: corpus.acoustic_dim,
        motion_dim: corpus.motion_dim,
        frame_rate: corpus.frame_rate,
    };
    save_corpus(out, header, &utts).with_context(|| format!("cannot write {}", out.display()))?;
    eprintln!("wrote {} utterances to {}", utts.len(), out.display());
    Ok(())
}

/// Model config, data and init seed for the requested modality.
fn modality_setup(
    run: &RunConfig,
    header: CorpusHeader,
    data: Vec<ToyUtterance>,
    modality: Modality,
) -> anyhow::Result<(ModelConfig, Vec<ToyUtterance>, u64)> {
    let joint = &run.model;
    if (joint.acoustic_dim, joint.motion_dim) != (header.acoustic_dim, header.motion_dim) {
        return Err(usage(format!(
            "model dims {}+{} do not match data dims {}+{}",
            joint.acoustic_dim, joint.motion_dim, header.acoustic_dim, header.motion_dim
        )));
    }
    let seeds = Rng::new(run.train.seed, 0);
    Ok(match modality {
        Modality::Joint => (joint.clone(), data, run.train.seed),
        Modality::Acoustic | Modality::Motion => {
            let (da, dm) = input(split_dataset(&data), "data")?;
            let (ca, cm) = marginal_configs(joint);
            if modality == Modality::Acoustic {
                (ca, da, seeds.named("marginal.acoustic").stream())
            } else {
                (cm, dm, seeds.named("marginal.motion").stream())
            }
        }
    })
}

/// Alignments of the acoustic half of `data` under an acoustic-only checkpoint.
fn acoustic_alignments(run: &RunConfig, data: &[ToyUtterance], path: &Path) -> anyhow::Result<Vec<Vec<usize>>> {
    let ck = load_checkpoint(path)?;
    let (ca, _) = marginal_configs(&run.model);
    input(ck.check_config(&ca), format!("checkpoint {}", path.display()))?;
    let model = input(ck.to_model(), format!("checkpoint {}", path.display()))?;
    let (da, _) = input(split_dataset(data), "data")?;
    Ok(align_dataset(&model, &da)?)
}

struct TrainArgs<'a> {
    data: &'a Path,
    config: Option<&'a Path>,
    regime: Option<RegimeArg>,
    out: &'a Path,
    resume: Option<&'a Path>,
    modality: Modality,
    align_ckpt: Option<&'a Path>,
    metrics: Option<&'a Path>,
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut run = load_config(a.config)?;
    if let Some(r) = a.regime {
        run.model.regime = r.into();
    }
    run.train.precision = Precision::F32;
    let (header, data) = load_data(a.data)?;
    if data.is_empty() {
        return Err(usage(format!("data {} has no utterances", a.data.display())));
    }
    let durations = match (a.align_ckpt, a.modality) {
        (None, _) => None,
        (Some(path), Modality::Motion) => Some(acoustic_alignments(&run, &data, path)?),
        (Some(_), _) => return Err(usage("--align-ckpt only applies to --modality motion")),
    };
    let (model_cfg, data, seed) = modality_setup(&run, header, data, a.modality)?;
    let train_cfg = TrainConfig {
        seed,
        ..run.train.clone()
    };
    let mut trainer = match a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            input(ck.check_config(&model_cfg), format!("checkpoint {}", path.display()))?;
            let stored = TrainConfig {
                updates: train_cfg.updates,
                ..ck.train_config.clone()
            };
            if stored != train_cfg {
                return Err(usage(format!(
                    "checkpoint {} was trained with a different train config; only `updates` may change on resume",
                    path.display()
                )));
            }
            input(ck.to_trainer(train_cfg), format!("checkpoint {}", path.display()))?
        }
        None => Trainer::new(Model::new(model_cfg, seed)?, train_cfg)?,
    };
    if let Some(d) = durations {
        trainer = trainer.with_durations(d);
    }
    let metrics_path = a.metrics.map_or_else(|| with_suffix(a.out, ".metrics.jsonl"), Path::to_path_buf);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&metrics_path)
        .with_context(|| format!("cannot open {}", metrics_path.display()))?;
    let mut log_err = None;
    eprintln!(
        "training {} ({} params) from update {} to {}",
        trainer.model.config.regime,
        trainer.model.num_params(),
        trainer.update,
        trainer.config.updates
    );
    trainer.run(&data, |rec: &MetricsRecord| {
        eprintln!("update {} loss {:.4} ({:.1}s)", rec.update, rec.loss_total, rec.seconds_elapsed);
        if log_err.is_none() {
            let line = serde_json::to_string(rec).map_err(std::io::Error::other);
            if let Err(e) = line.and_then(|l| writeln!(log, "{l}")) {
                log_err = Some(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e).with_context(|| format!("cannot write {}", metrics_path.display()));
    }
    Checkpoint::from_trainer(&trainer)
        .save(a.out)
        .with_context(|| format!("cannot write {}", a.out.display()))?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn sampler_config(steps: usize, temperature: f64) -> anyhow::Result<SamplerConfig> {
    let cfg = SamplerConfig {
        temperature,
        ..SamplerConfig::with_steps(steps)
    };
    input(cfg.validate(), "sampler")?;
    Ok(cfg)
}

fn cmd_synth(ckpt: &Path, tokens: &str, steps: usize, temperature: f64, seed: u64, out: &Path) -> anyhow::Result<()> {
    let tokens = parse_tokens(tokens)?;
    let cfg = sampler_config(steps, temperature)?;
    let (model, _) = load_model(ckpt)?;
    check_vocab(&tokens, model.config.vocab_size)?;
    let syn = synthesize(&tokens, &model, &cfg, &mut Rng::new(seed, 0))?;
    let seq = &syn.sequence;
    let header = CorpusHeader {
        acoustic_dim: seq.acoustic_dim,
        motion_dim: seq.motion_dim,
        frame_rate: seq.frame_rate,
    };
    let utt = ToyUtterance {
        tokens: tokens.clone(),
        frames: seq.clone(),
        latent: Tensor::zeros(&[seq.len()]),
    };
    save_corpus(out, header, &[utt]).with_context(|| format!("cannot write {}", out.display()))?;
    let t = syn.timing;
    write_json(
        &with_suffix(out, ".json"),
        &json!({
            "tokens": tokens,
            "durations": syn.durations,
            "n_frames": seq.len(),
            "output_seconds": seq.seconds(),
            "n_steps": steps,
            "temperature": temperature,
            "seed": seed,
            "timing": {
                "encoder_seconds": t.encoder_seconds,
                "solver_seconds": t.solver_seconds,
                "total_seconds": t.total(),
            },
        }),
    )?;
    eprintln!("wrote {} frames to {}", seq.len(), out.display());
    Ok(())
}

enum Source {
    Raw,
    Unified(Model),
    Marginal(MarginalBaseline),
}

impl Source {
    fn name(&self) -> &'static str {
        match self {
            Source::Raw => "raw",
            Source::Unified(_) => "unified",
            Source::Marginal(_) => "marginal",
        }
    }

    fn dims(&self) -> Option<(usize, usize)> {
        match self {
            Source::Raw => None,
            Source::Unified(m) => Some((m.config.acoustic_dim, m.config.motion_dim)),
            Source::Marginal(b) => Some(b.dims()),
        }
    }

    fn vocab(&self) -> Option<usize> {
        match self {
            Source::Raw => None,
            Source::Unified(m) => Some(m.config.vocab_size),
            Source::Marginal(b) => Some(b.acoustic.config.vocab_size.min(b.motion.config.vocab_size)),
        }
    }

    fn synthesize(&self, tokens: &[u32], cfg: &SamplerConfig, rng: &mut Rng) -> flowsynth::Result<Synthesis> {
        match self {
            Source::Raw => unreachable!("raw data is not synthesized"),
            Source::Unified(m) => synthesize(tokens, m, cfg, rng),
            Source::Marginal(b) => b.synthesize(tokens, cfg, rng),
        }
    }
}

struct EvalArgs<'a> {
    ckpt: Option<&'a Path>,
    marginal: Option<&'a [PathBuf]>,
    data: &'a Path,
    metric: Metric,
    out: &'a Path,
    steps: usize,
    temperature: f64,
    seed: u64,
    limit: Option<usize>,
    rtf_steps: &'a [usize],
    repeats: usize,
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let cfg = sampler_config(a.steps, a.temperature)?;
    let mut hashed = serde_json::to_string(&cfg)?;
    let source = match (a.ckpt, a.marginal) {
        (Some(p), _) => {
            let (model, ck) = load_model(p)?;
            hashed.push_str(&ck.config_text()?);
            Source::Unified(model)
        }
        (None, Some([pa, pm])) => {
            let (acoustic, ca) = load_model(pa)?;
            let (motion, cm) = load_model(pm)?;
            if acoustic.config.motion_dim != 0 || motion.config.acoustic_dim != 0 {
                return Err(usage("--marginal-ckpts expects an acoustic-only then a motion-only checkpoint"));
            }
            hashed.push_str(&ca.config_text()?);
            hashed.push_str(&cm.config_text()?);
            Source::Marginal(MarginalBaseline { acoustic, motion })
        }
        _ => Source::Raw,
    };
    if matches!(source, Source::Raw) && a.metric != Metric::Xmodal {
        return Err(usage(format!("metric {} needs --ckpt or --marginal-ckpts", a.metric.name())));
    }
    if matches!(source, Source::Marginal(_)) && a.metric == Metric::Rtf {
        return Err(usage("metric rtf needs --ckpt"));
    }
    let (header, mut data) = load_data(a.data)?;
    if let Some(n) = a.limit {
        data.truncate(n);
    }
    if data.is_empty() {
        return Err(usage(format!("data {} has no utterances", a.data.display())));
    }
    if let Some(dims) = source.dims() {
        if dims != (header.acoustic_dim, header.motion_dim) {
            return Err(usage(format!(
                "model dims {}+{} do not match data dims {}+{}",
                dims.0, dims.1, header.acoustic_dim, header.motion_dim
            )));
        }
    }
    if let Some(v) = source.vocab() {
        for u in &data {
            check_vocab(&u.tokens, v)?;
        }
    }
    let root = Rng::new(a.seed, 0);
    let mut result = json!({
        "metric": a.metric.name(),
        "source": source.name(),
        "count": data.len(),
        "seed": a.seed,
        "config_hash": hash_text(&hashed),
        "n_steps": a.steps,
        "temperature": a.temperature,
    });
    let value = match (&source, a.metric) {
        (Source::Raw, _) => {
            let seqs: Vec<JointFrameSequence> = data.iter().map(|u| u.frames.clone()).collect();
            cross_modal_dependence(&seqs)?
        }
        (Source::Unified(model), Metric::Rtf) => {
            let mut steps: Vec<usize> = a.rtf_steps.iter().copied().chain([a.steps]).collect();
            steps.sort_unstable();
            steps.dedup();
            let configs = steps
                .iter()
                .map(|&n| sampler_config(n, a.temperature))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let tokens: Vec<Vec<u32>> = data.iter().map(|u| u.tokens.clone()).collect();
            let rows = benchmark_rtf(model, &configs, &tokens, a.repeats, &root.named("rtf"))?;
            let value = rows.iter().find(|r| r.n_steps == a.steps).map(|r| r.rtf).unwrap_or(f64::NAN);
            result["rows"] = serde_json::to_value(&rows)?;
            value
        }
        (_, metric) => {
            let gen = root.named("eval");
            let synth: Vec<JointFrameSequence> = data
                .par_iter()
                .enumerate()
                .map(|(i, u)| source.synthesize(&u.tokens, &cfg, &mut gen.child(i as u64)).map(|s| s.sequence))
                .collect::<flowsynth::Result<_>>()?;
            if metric == Metric::Xmodal {
                cross_modal_dependence(&synth)?
            } else {
                let real: Vec<JointFrameSequence> = data.iter().map(|u| u.frames.clone()).collect();
                energy_distance(&synth, &real, &root.named("energy"))?
            }
        }
    };
    result["value"] = json!(value);
    write_json(a.out, &result)?;
    println!("{} {value:.6}", a.metric.name());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenerateData { config, out, seed } => cmd_generate_data(config.as_deref(), &out, seed),
        Command::Train {
            data,
            config,
            regime,
            out,
            resume,
            modality,
            align_ckpt,
            metrics,
        } => cmd_train(TrainArgs {
            data: &data,
            config: config.as_deref(),
            regime,
            out: &out,
            resume: resume.as_deref(),
            modality,
            align_ckpt: align_ckpt.as_deref(),
            metrics: metrics.as_deref(),
        }),
        Command::Synth {
            ckpt,
            tokens,
            steps,
            temperature,
            seed,
            out,
        } => cmd_synth(&ckpt, &tokens, steps, temperature, seed, &out),
        Command::Eval {
            ckpt,
            marginal_ckpts,
            data,
            metric,
            out,
            steps,
            temperature,
            seed,
            limit,
            rtf_steps,
            repeats,
        } => cmd_eval(EvalArgs {
            ckpt: ckpt.as_deref(),
            marginal: marginal_ckpts.as_deref(),
            data: &data,
            metric,
            out: &out,
            steps,
            temperature,
            seed,
            limit,
            rtf_steps: &rtf_steps,
            repeats,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
