//! Command implementations behind the `mntp` binary.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mntp::codec::{gen_synthetic, load_dataset, save_dataset, tokenize, unflatten_unpatchify, FramePadding, Geometry, LatentMap, SyntheticProcess, TokenSequence};
use mntp::decode::{decode_grouped, DecodeOrder, DecodingPolicy, RevealOrder};
use mntp::diffusion::{DiffusionConfig, HeadConfig, NoiseSchedule};
use mntp::eval::{fit_ar_transition, frechet_distance, frobenius_distance, heldout_diffusion_loss, measure_rtf, stationary_moment_error, EvalReport, GaussianStats};
use mntp::masking::{sample_ratio, MaskSchedule};
use mntp::model::{AttentionMode, Condition, ModelConfig};
use mntp::numerics::Rng;
use mntp::trainer::{load_checkpoint, make_ablation_config, save_checkpoint, train, TrainConfig, TrainState};

/// Failure of a command: bad input (exit 2) or a runtime error (exit 1).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<mntp::Error> for CliError {
    fn from(e: mntp::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Head shape; the token dim comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSpec {
    pub layers: usize,
    pub width: usize,
    pub time_dim: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self { layers: 3, width: 128, time_dim: 64 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub heldout: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a training run needs, read from strict JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model preset name.
    pub model: String,
    /// Positional table length; defaults to the training sequence length.
    pub max_len: Option<usize>,
    pub head: HeadSpec,
    pub train: TrainConfig,
    pub diffusion: DiffusionConfig,
    /// Default policy for `sample` runs of the resulting checkpoint.
    pub decoding: Option<DecodingPolicy>,
    /// Save a checkpoint every this many steps (0: final only).
    pub checkpoint_every: u64,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "mini".into(),
            max_len: None,
            head: HeadSpec::default(),
            train: TrainConfig::default(),
            diffusion: DiffusionConfig::default(),
            decoding: None,
            checkpoint_every: 0,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Parse and validate; returns the config and the raw JSON it came from.
    pub fn from_json(text: &str) -> CliResult<(Self, serde_json::Value)> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config is not JSON: {e}")))?;
        let cfg: RunConfig = serde_json::from_value(raw.clone()).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(p) = &cfg.decoding {
            p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok((cfg, raw))
    }

    pub fn load(path: &Path) -> CliResult<(Self, serde_json::Value)> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text)
    }
}

/// Thread count from `MNTP_THREADS` (default 1).
pub fn thread_count() -> CliResult<usize> {
    match std::env::var("MNTP_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => usage(format!("MNTP_THREADS must be a positive integer, got {v:?}")),
        },
    }
}

#[derive(Parser, Debug)]
#[command(name = "mntp", version, about = "Continuous-token autoregressive modeling with a diffusion head")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a token dataset and a JSON sidecar with the true process.
    MakeData(MakeDataArgs),
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Generate sequences from a checkpoint.
    Sample(SampleArgs),
    /// Compare generated and reference sequences.
    Eval(EvalArgs),
    /// Train one row of the MNTP component ablation.
    Ablate(AblateArgs),
    /// Histogram of masking ratios drawn from a schedule.
    ScheduleHist(HistArgs),
    /// Check that tokenization is exactly invertible for a geometry.
    RoundtripCheck(RoundtripArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProcessArg {
    GaussianAr,
    SinusoidMap,
}

#[derive(Args, Debug)]
pub struct MakeDataArgs {
    #[arg(long, value_enum)]
    pub process: ProcessArg,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub length: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Token dim (gaussian-ar).
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    /// Patch size (sinusoid-map; token dim is patch³).
    #[arg(long, default_value_t = 2)]
    pub patch: usize,
    /// Spectral radius of the transition (gaussian-ar).
    #[arg(long, default_value_t = 0.8)]
    pub rho: f64,
    #[arg(long, default_value_t = 1.0)]
    pub offset_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise_std: f64,
    /// Reuse the process of an existing sidecar instead of drawing one.
    #[arg(long)]
    pub sidecar_in: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out data for periodic teacher-forced loss.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint stem instead of initializing.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop at this step instead of the configured total.
    #[arg(long)]
    pub until: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrderArg {
    Causal,
    Random,
    LeftToRight,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Sequence length (default: the checkpoint's configured policy, else max length).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub count: usize,
    #[arg(long, value_enum)]
    pub order: Option<OrderArg>,
    /// Decoding rounds for random order.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Base guidance scale ω₀; omit for unguided sampling.
    #[arg(long)]
    pub cfg: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub inference_steps: Option<usize>,
    /// Take conditions from these records (cycled).
    #[arg(long, conflicts_with = "class")]
    pub cond_data: Option<PathBuf>,
    /// One-hot condition for this class.
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Reference sequences.
    #[arg(long)]
    pub data: PathBuf,
    /// Generated sequences.
    #[arg(long)]
    pub gen: PathBuf,
    /// Checkpoint for held-out loss and RTF.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Sidecar of the true process for AR and moment statistics.
    #[arg(long)]
    pub process: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Measure RTF against a clip of this many seconds.
    #[arg(long)]
    pub rtf_seconds: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Row a–k.
    #[arg(long)]
    pub row: String,
    /// Base config; its budget and optimizer settings are kept.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct HistArgs {
    #[arg(long)]
    pub preset: String,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_csv: PathBuf,
}

#[derive(Args, Debug)]
pub struct RoundtripArgs {
    /// `audio-10s` or `FRAMES,BANDS,CHANNELS,PATCH`.
    #[arg(long)]
    pub geometry: String,
    /// Additional random geometries to check.
    #[arg(long, default_value_t = 0)]
    pub fuzz: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::MakeData(a) => make_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::ScheduleHist(a) => schedule_hist(a),
        Command::RoundtripCheck(a) => roundtrip_check(a),
    }
}

/// JSON sidecar written next to a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub process: SyntheticProcess,
    pub count: usize,
    pub length: usize,
    pub seed: u64,
}

pub fn sidecar_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_sidecar(path: &Path) -> CliResult<Sidecar> {
    let text = fs::read_to_string(path).with_context(|| format!("reading sidecar {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing sidecar {}", path.display()))?)
}

fn make_data(a: MakeDataArgs) -> CliResult<()> {
    if a.count == 0 || a.length == 0 || a.classes == 0 {
        return usage("count, length and classes must be positive");
    }
    let process = match &a.sidecar_in {
        Some(p) => read_sidecar(p)?.process,
        None => {
            let mut rng = Rng::new(a.seed, "make-data/process");
            match a.process {
                ProcessArg::GaussianAr => {
                    if a.dim == 0 || !(0.0..1.0).contains(&a.rho) {
                        return usage("gaussian-ar needs dim ≥ 1 and 0 ≤ rho < 1");
                    }
                    SyntheticProcess::random_gaussian_ar(a.dim, a.classes, a.rho, a.offset_scale, a.noise_std, &mut rng)?
                }
                ProcessArg::SinusoidMap => {
                    if a.patch == 0 {
                        return usage("patch must be positive");
                    }
                    let freqs: Vec<f64> = (0..a.classes).map(|k| 0.02 + 0.08 * k as f64 / a.classes as f64).collect();
                    SyntheticProcess::sinusoid_map(a.patch, &freqs, a.noise_std)
                }
            }
        }
    };
    let mut rng = Rng::new(a.seed, "make-data/sequences");
    let seqs = (0..a.count).map(|i| gen_synthetic(&process, a.length, i % process.classes(), &mut rng)).collect::<mntp::Result<Vec<_>>>()?;
    save_dataset(&seqs, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let side = Sidecar { process, count: a.count, length: a.length, seed: a.seed };
    fs::write(sidecar_path(&a.out), serde_json::to_string_pretty(&side).map_err(anyhow::Error::from)? + "\n").context("writing sidecar")?;
    eprintln!("wrote {} sequences to {}", a.count, a.out.display());
    Ok(())
}

fn load_data(path: &Path) -> CliResult<Vec<TokenSequence>> {
    let d = load_dataset(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if d.is_empty() {
        return Err(anyhow!("dataset {} is empty", path.display()).into());
    }
    Ok(d)
}

fn required(flag: Option<PathBuf>, cfg: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    match flag.or_else(|| cfg.clone()) {
        Some(p) => Ok(p),
        None => usage(format!("--{name} is required (or set paths.{name} in the config)")),
    }
}

/// Build a fresh training state for `cfg` on `data`.
pub fn init_state(cfg: &RunConfig, data: &[TokenSequence]) -> CliResult<TrainState> {
    let first = &data[0];
    let max_len = cfg.max_len.unwrap_or_else(|| data.iter().map(|s| s.n).max().unwrap_or(1));
    let model = ModelConfig::preset(&cfg.model, first.dim, first.cond_dim.max(1), max_len).map_err(|e| CliError::Usage(e.to_string()))?;
    let head = HeadConfig::new(first.dim, cfg.head.layers, cfg.head.width, cfg.head.time_dim);
    head.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(TrainState::new(model, head, cfg.train.clone(), cfg.diffusion.clone())?)
}

/// Train `state` to `until`, writing `loss.csv`, periodic checkpoints and
/// `final` under `out`.
pub fn run_training(state: &mut TrainState, data: &[TokenSequence], heldout: Option<&[TokenSequence]>, out: &Path, until: u64, every: u64) -> CliResult<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let loss_path = out.join("loss.csv");
    let fresh = state.step == 0 || !loss_path.exists();
    let mut csv = BufWriter::new(OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&loss_path).context("opening loss.csv")?);
    if fresh {
        writeln!(csv, "step,loss,slots").context("writing loss.csv")?;
    }
    let mut held_csv = match heldout {
        Some(_) => {
            let p = out.join("heldout.csv");
            let new = fresh || !p.exists();
            let mut w = BufWriter::new(OpenOptions::new().create(true).append(!new).write(true).truncate(new).open(&p).context("opening heldout.csv")?);
            if new {
                writeln!(w, "step,heldout_loss").context("writing heldout.csv")?;
            }
            Some(w)
        }
        None => None,
    };
    let sched = NoiseSchedule::from_config(&state.diffusion)?;
    let eval_every = state.config.eval_every;
    let causal = state.config.attention == AttentionMode::Causal;
    let mut window = (0.0, 0u64);
    let result = train(state, data, until, |s, r| {
        writeln!(csv, "{},{},{}", r.step, r.loss, r.slots)?;
        window.0 += r.loss;
        window.1 += 1;
        if eval_every > 0 && r.step % eval_every == 0 {
            let mut line = format!("step {} loss {:.5}", r.step, window.0 / window.1 as f64);
            if let (Some(h), Some(w), true) = (heldout, held_csv.as_mut(), causal) {
                let l = heldout_diffusion_loss(&s.model, h, &sched, 0, 1)?;
                writeln!(w, "{},{}", r.step, l)?;
                line += &format!(" heldout {l:.5}");
            }
            eprintln!("{line}");
            window = (0.0, 0);
        }
        if every > 0 && r.step % every == 0 {
            save_checkpoint(s, out.join(format!("step-{:07}", r.step)))?;
        }
        Ok(())
    });
    csv.flush().context("writing loss.csv")?;
    if let Some(mut w) = held_csv {
        w.flush().context("writing heldout.csv")?;
    }
    result?;
    save_checkpoint(state, out.join("final"))?;
    eprintln!("saved {}", out.join("final").display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let (cfg, raw) = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None if a.resume.is_some() => (RunConfig::default(), serde_json::Value::Null),
        None => return usage("--config is required unless resuming"),
    };
    let data_path = required(a.data, &cfg.paths.data, "data")?;
    let out = required(a.out, &cfg.paths.out, "out")?;
    let data = load_data(&data_path)?;
    let heldout = match a.heldout.or(cfg.paths.heldout.clone()) {
        Some(p) => Some(load_data(&p)?),
        None => None,
    };
    let (mut state, every) = match &a.resume {
        Some(stem) => {
            let s = load_checkpoint(stem).with_context(|| format!("loading checkpoint {}", stem.display()))?;
            let every = serde_json::from_value::<RunConfig>(s.echo.clone()).map(|c| c.checkpoint_every).unwrap_or(0);
            (s, every)
        }
        None => {
            let mut s = init_state(&cfg, &data)?;
            s.echo = raw;
            (s, cfg.checkpoint_every)
        }
    };
    let until = a.until.unwrap_or(state.config.steps);
    if until < state.step {
        return usage(format!("--until {until} is before the checkpoint step {}", state.step));
    }
    run_training(&mut state, &data, heldout.as_deref(), &out, until, every)
}

fn ablate(a: AblateArgs) -> CliResult<()> {
    let (base, _) = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => (RunConfig::default(), serde_json::Value::Null),
    };
    let mut t = make_ablation_config(&a.row).map_err(|e| CliError::Usage(e.to_string()))?;
    let b = &base.train;
    t.batch_size = a.batch.unwrap_or(b.batch_size);
    t.steps = a.steps.unwrap_or(b.steps);
    t.seed = a.seed.unwrap_or(b.seed);
    t.lr = b.lr;
    t.weight_decay = b.weight_decay;
    t.beta1 = b.beta1;
    t.beta2 = b.beta2;
    t.cond_dropout = b.cond_dropout;
    t.eval_every = b.eval_every;
    t.head_reps = b.head_reps;
    t.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = RunConfig { train: t, ..base };
    let data_path = required(a.data, &cfg.paths.data, "data")?;
    let out = required(a.out, &cfg.paths.out, "out")?;
    let data = load_data(&data_path)?;
    let heldout = match a.heldout.or(cfg.paths.heldout.clone()) {
        Some(p) => Some(load_data(&p)?),
        None => None,
    };
    let mut state = init_state(&cfg, &data)?;
    state.echo = serde_json::to_value(&cfg).map_err(anyhow::Error::from)?;
    let until = cfg.train.steps;
    run_training(&mut state, &data, heldout.as_deref(), &out, until, cfg.checkpoint_every)
}

fn one_hot(class: usize, width: usize, rows: usize) -> Vec<f32> {
    let mut v = vec![0.0; width * rows];
    for r in 0..rows {
        v[r * width + class] = 1.0;
    }
    v
}

fn sample(a: SampleArgs) -> CliResult<()> {
    let threads = thread_count()?;
    let state = load_checkpoint(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let model = &state.model;
    let configured = serde_json::from_value::<RunConfig>(state.echo.clone()).ok().and_then(|c| c.decoding);
    let bidirectional = model.config.attention == AttentionMode::Bidirectional;
    let mut policy = configured.unwrap_or_else(|| {
        let n = model.config.max_len;
        if bidirectional {
            DecodingPolicy::random(n, n.min(64))
        } else {
            DecodingPolicy::causal(n)
        }
    });
    if let Some(n) = a.n {
        policy.n = n;
        if policy.order == DecodeOrder::Causal {
            policy.steps = n;
        } else {
            policy.steps = policy.steps.min(n);
        }
    }
    match a.order {
        Some(OrderArg::Causal) => {
            policy.order = DecodeOrder::Causal;
            policy.steps = policy.n;
            policy.reveal = RevealOrder::Random;
        }
        Some(OrderArg::Random) => {
            policy.order = DecodeOrder::Random;
            policy.reveal = RevealOrder::Random;
        }
        Some(OrderArg::LeftToRight) => {
            policy.order = DecodeOrder::Random;
            policy.reveal = RevealOrder::LeftToRight;
        }
        None => {}
    }
    if let Some(s) = a.steps {
        policy.steps = s;
    }
    if a.cfg.is_some() {
        policy.cfg = a.cfg;
    }
    if let Some(t) = a.tau {
        policy.tau = t;
    }
    policy.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.count == 0 {
        return usage("--count must be positive");
    }
    let mut dcfg = state.diffusion.clone();
    if let Some(s) = a.inference_steps {
        if s == 0 || s > dcfg.train_steps {
            return usage("--inference-steps must lie in 1..=train steps");
        }
        dcfg.inference_steps = s;
    }
    let sched = NoiseSchedule::from_config(&dcfg)?;

    let c = &model.config;
    let records;
    let hot;
    let conds: Vec<Condition> = match (&a.cond_data, a.class) {
        (Some(p), _) => {
            records = load_data(p)?;
            records.iter().cycle().take(a.count).map(Condition::of).collect()
        }
        (None, Some(k)) => {
            if k >= c.cond_dim {
                return usage(format!("class {k} out of range for condition width {}", c.cond_dim));
            }
            hot = one_hot(k, c.cond_dim, c.prefix_len);
            vec![Condition::Real { rows: &hot, len: c.prefix_len }; a.count]
        }
        (None, None) => vec![Condition::Fake; a.count],
    };
    let rng = Rng::new(a.seed, "sample");
    let out = decode_grouped(model, &conds, &policy, &sched, &rng, 64, threads)?;
    save_dataset(&out.sequences, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("wrote {} sequences ({} head evaluations) to {}", out.sequences.len(), out.head_evals, a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let reference = load_data(&a.data)?;
    let generated = load_data(&a.gen)?;
    let fd = frechet_distance(&GaussianStats::from_sequences(&reference)?, &GaussianStats::from_sequences(&generated)?)?;
    let mut report = EvalReport {
        latent_fd: fd,
        heldout_diff_loss: None,
        ar_coef_error: None,
        moment_error: None,
        rtf: None,
        config: serde_json::json!({
            "data": a.data,
            "gen": a.gen,
            "reps": a.reps,
            "seed": a.seed,
        }),
        seeds: vec![a.seed],
    };
    if let Some(p) = &a.process {
        let side = read_sidecar(p)?;
        if side.process.kind == mntp::codec::ProcessKind::GaussianAr {
            let fit = fit_ar_transition(&generated)?;
            report.ar_coef_error = Some(frobenius_distance(&fit.transition, &side.process.transition));
            let n = generated.iter().map(|s| s.n).min().unwrap_or(0);
            report.moment_error = Some(stationary_moment_error(&generated, &side.process, n / 4)?);
        }
    }
    if let Some(stem) = &a.ckpt {
        let state = load_checkpoint(stem).with_context(|| format!("loading checkpoint {}", stem.display()))?;
        let sched = NoiseSchedule::from_config(&state.diffusion)?;
        if state.model.config.attention == AttentionMode::Causal {
            if a.reps == 0 {
                return usage("--reps must be positive");
            }
            report.heldout_diff_loss = Some(heldout_diffusion_loss(&state.model, &reference, &sched, a.seed, a.reps)?);
        }
        if let Some(clip) = a.rtf_seconds {
            let n = reference[0].n;
            let policy = if state.model.config.attention == AttentionMode::Causal { DecodingPolicy::causal(n) } else { DecodingPolicy::random(n, n.min(64)) };
            let m = measure_rtf(&state.model, &policy, &sched, Condition::of(&reference[0]), clip, &Rng::new(a.seed, "rtf"))?;
            report.rtf = Some(m.rtf);
        }
        report.config["checkpoint"] = state.echo.clone();
        report.seeds.push(state.config.seed);
    } else if a.rtf_seconds.is_some() {
        return usage("--rtf-seconds needs --ckpt");
    }
    let text = report.to_json()?;
    match &a.out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

/// `(bin_center, density)` rows over [0, 1].
pub fn schedule_histogram(schedule: &MaskSchedule, bins: usize, samples: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = Rng::new(seed, "schedule-hist");
    let mut counts = vec![0usize; bins];
    for _ in 0..samples {
        let r = sample_ratio(schedule, &mut rng);
        counts[((r * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let width = 1.0 / bins as f64;
    counts.iter().enumerate().map(|(i, &c)| ((i as f64 + 0.5) * width, c as f64 / (samples as f64 * width))).collect()
}

fn schedule_hist(a: HistArgs) -> CliResult<()> {
    if a.bins == 0 || a.samples == 0 {
        return usage("bins and samples must be positive");
    }
    let schedule = MaskSchedule::preset(&a.preset).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut w = BufWriter::new(File::create(&a.out_csv).with_context(|| format!("creating {}", a.out_csv.display()))?);
    writeln!(w, "bin_center,density").context("writing histogram")?;
    for (c, d) in schedule_histogram(&schedule, a.bins, a.samples, a.seed) {
        writeln!(w, "{c},{d}").context("writing histogram")?;
    }
    w.flush().context("writing histogram")?;
    Ok(())
}

pub fn parse_geometry(s: &str) -> CliResult<Geometry> {
    if s == "audio-10s" || s == "audio_10s" {
        return Ok(Geometry::audio_10s());
    }
    let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>()).collect::<std::result::Result<_, _>>().map_err(|_| CliError::Usage(format!("bad geometry {s:?}")))?;
    match parts[..] {
        [frames, bands, channels, patch] if patch > 0 && bands % patch == 0 && frames > 0 && channels > 0 => {
            Ok(Geometry { frames, bands, channels, patch, padding: FramePadding::ToPatch })
        }
        _ => usage(format!("geometry {s:?} must be audio-10s or FRAMES,BANDS,CHANNELS,PATCH with PATCH dividing BANDS")),
    }
}

/// Tokenize a random map of `geom` and invert it; true iff every value
/// comes back bit-exact.
pub fn roundtrip_holds(geom: &Geometry, rng: &mut Rng) -> mntp::Result<bool> {
    let values: Vec<f32> = (0..geom.frames * geom.bands * geom.channels).map(|_| rng.normal() as f32).collect();
    let map = LatentMap::new(geom.frames, geom.bands, geom.channels, values)?;
    let back = unflatten_unpatchify(&tokenize(&map, geom)?, geom)?;
    Ok(back.frames == map.frames && back.values.iter().map(|v| v.to_bits()).eq(map.values.iter().map(|v| v.to_bits())))
}

fn roundtrip_check(a: RoundtripArgs) -> CliResult<()> {
    let geom = parse_geometry(&a.geometry)?;
    let mut rng = Rng::new(a.seed, "roundtrip");
    let mut geoms = vec![geom];
    for _ in 0..a.fuzz {
        let patch = 1 + rng.below(4);
        geoms.push(Geometry {
            frames: 1 + rng.below(40),
            bands: patch * (1 + rng.below(6)),
            channels: 1 + rng.below(4),
            patch,
            padding: FramePadding::ToPatch,
        });
    }
    for g in &geoms {
        if !roundtrip_holds(g, &mut rng)? {
            return Err(anyhow!("tokenization is not invertible for {g:?}").into());
        }
    }
    eprintln!("roundtrip exact for {} geometries", geoms.len());
    Ok(())
}
