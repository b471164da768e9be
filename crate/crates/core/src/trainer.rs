//! Task assembly (NTP, MNTP, MAR), the optimization loop and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::TokenSequence;
use crate::diffusion::{head_loss, DiffusionConfig, HeadConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::masking::{sample_plan, sample_ratio, MaskPlan, MaskSchedule, MaskStrategy};
use crate::model::{encode_context, AttentionMode, Bound, Condition, ModelConfig, ModelState, ParamSet, SlotSpec};
use crate::numerics::{Rng, RngState, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Ntp,
    Mntp,
    Mar,
}

/// What each input slot is asked to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Prediction {
    /// The immediately following token.
    Next,
    /// The next kept token after dropping.
    Skip,
    /// The token at the slot's own (masked) position.
    Masked,
}

/// A schedule given by preset name or spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Preset(String),
    Custom(MaskSchedule),
}

impl ScheduleSpec {
    pub fn resolve(&self) -> Result<MaskSchedule> {
        let s = match self {
            ScheduleSpec::Preset(name) => MaskSchedule::preset(name)?,
            ScheduleSpec::Custom(s) => s.clone(),
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: Task,
    pub schedule: ScheduleSpec,
    pub strategy: MaskStrategy,
    pub prediction: Prediction,
    pub target_pos_emb: bool,
    pub attention: AttentionMode,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub cond_dropout: f64,
    pub seed: u64,
    pub eval_every: u64,
    /// Diffusion draws per loss slot (context vectors are reused).
    pub head_reps: usize,
    /// Fraction of `steps` trained on bidirectional masked prediction
    /// before switching to this config's causal task.
    pub mar_warmup: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Mntp,
            schedule: ScheduleSpec::Preset("mixture-default".into()),
            strategy: MaskStrategy::Drop,
            prediction: Prediction::Skip,
            target_pos_emb: true,
            attention: AttentionMode::Causal,
            batch_size: 64,
            steps: 20_000,
            lr: 1e-4,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.95,
            cond_dropout: 0.1,
            seed: 0,
            eval_every: 1000,
            head_reps: 4,
            mar_warmup: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn ntp() -> Self {
        Self {
            task: Task::Ntp,
            schedule: ScheduleSpec::Preset("none".into()),
            strategy: MaskStrategy::None,
            prediction: Prediction::Next,
            target_pos_emb: false,
            ..Self::default()
        }
    }

    pub fn mntp() -> Self {
        Self::default()
    }

    pub fn mar() -> Self {
        Self {
            task: Task::Mar,
            schedule: ScheduleSpec::Preset("mar-range".into()),
            strategy: MaskStrategy::Zero,
            prediction: Prediction::Masked,
            target_pos_emb: false,
            attention: AttentionMode::Bidirectional,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(m.to_string()));
        self.schedule.resolve()?;
        match self.task {
            Task::Ntp => {
                if self.strategy != MaskStrategy::None || self.prediction != Prediction::Next {
                    return bad("task ntp needs strategy none and prediction next");
                }
            }
            Task::Mntp => {
                if self.strategy == MaskStrategy::None || self.prediction == Prediction::Masked {
                    return bad("task mntp needs a masking strategy and next or skip prediction");
                }
                if self.prediction == Prediction::Skip && self.strategy != MaskStrategy::Drop {
                    return bad("skip prediction needs strategy drop");
                }
            }
            Task::Mar => {
                if self.attention != AttentionMode::Bidirectional
                    || !matches!(self.strategy, MaskStrategy::Zero | MaskStrategy::Gaussian)
                    || self.prediction != Prediction::Masked
                {
                    return bad("task mar needs bidirectional attention, zero or gaussian masking and masked prediction");
                }
                if self.mar_warmup > 0.0 {
                    return bad("a masked-prediction warmup only applies to causal tasks");
                }
            }
        }
        if self.task != Task::Mar && self.attention != AttentionMode::Causal {
            return bad("ntp and mntp need causal attention");
        }
        if self.batch_size == 0 || self.head_reps == 0 {
            return bad("batch size and head reps must be positive");
        }
        if !(0.0..=1.0).contains(&self.mar_warmup) {
            return bad("masked-prediction warmup fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad("condition dropout must lie in [0, 1]");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optimizer settings out of range");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.mar_warmup * self.steps as f64).round() as u64
    }

    /// Copy the attention mode and target-embedding flag into a model config.
    pub fn apply_to(&self, model: &mut ModelConfig) {
        model.attention = self.attention;
        model.target_pos_emb = self.target_pos_emb;
    }
}

/// Table-of-ablations presets, rows `a` through `k`.
pub fn make_ablation_config(row: &str) -> Result<TrainConfig> {
    let mntp = TrainConfig::mntp();
    let masked_next = |strategy, schedule: &str| TrainConfig {
        strategy,
        schedule: ScheduleSpec::Preset(schedule.into()),
        prediction: Prediction::Next,
        target_pos_emb: false,
        ..TrainConfig::mntp()
    };
    Ok(match row {
        "a" => TrainConfig::ntp(),
        "b" => TrainConfig { mar_warmup: 0.5, ..TrainConfig::ntp() },
        "c" => masked_next(MaskStrategy::Zero, "fixed-0.7"),
        "d" => masked_next(MaskStrategy::Gaussian, "uniform"),
        "e" => masked_next(MaskStrategy::Drop, "mixture-default"),
        "f" => masked_next(MaskStrategy::Zero, "mixture-default"),
        "g" | "j" => mntp,
        "h" => TrainConfig { schedule: ScheduleSpec::Preset("mar-range".into()), ..mntp },
        "i" => TrainConfig { target_pos_emb: false, ..mntp },
        "k" => TrainConfig::mar(),
        other => return Err(Error::Argument(format!("unknown ablation row {other:?}; expected a..k"))),
    })
}

/// Per-slot inputs and loss targets for one training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub fake_condition: bool,
    pub bos_target: usize,
    pub inputs: Vec<f32>,
    pub content: Vec<usize>,
    pub target: Vec<usize>,
    /// `(slot, token)` pairs; slot 0 is β, slot `j ≥ 1` is input `j − 1`.
    pub loss: Vec<(usize, usize)>,
}

/// Task shape for one step (the warmup stage of row b uses MAR's).
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub strategy: MaskStrategy,
    pub prediction: Prediction,
    pub schedule: MaskSchedule,
}

/// Build the slot layout for `seq` under `plan`. Returns `None` when no
/// slot carries a loss.
pub fn layout_example(seq: &TokenSequence, plan: &MaskPlan, prediction: Prediction, fill: &mut Rng) -> Option<Example> {
    let n = seq.n;
    let h = seq.dim;
    let mut ex = Example { fake_condition: false, bos_target: 0, inputs: Vec::new(), content: Vec::new(), target: Vec::new(), loss: Vec::new() };
    match prediction {
        Prediction::Skip => {
            // feed every kept token but the last; each predicts the next kept one
            let kept = &plan.kept;
            let &first = kept.first()?;
            ex.bos_target = first;
            ex.loss.push((0, first));
            for (j, &k) in kept.iter().enumerate().take(kept.len().saturating_sub(1)) {
                ex.inputs.extend_from_slice(seq.token(k));
                ex.content.push(k);
                ex.target.push(plan.targets[j]);
                ex.loss.push((j + 1, plan.targets[j]));
            }
        }
        Prediction::Next if plan.strategy == MaskStrategy::Drop => {
            ex.loss.push((0, 0));
            for &k in plan.kept.iter().filter(|&&k| k + 1 < n) {
                ex.inputs.extend_from_slice(seq.token(k));
                ex.content.push(k);
                ex.target.push(k + 1);
                ex.loss.push((ex.content.len(), k + 1));
            }
        }
        Prediction::Next => {
            let filled = plan.apply(&seq.tokens, h, fill);
            ex.loss.push((0, 0));
            for i in 0..n - 1 {
                ex.inputs.extend_from_slice(&filled[i * h..(i + 1) * h]);
                ex.content.push(i);
                ex.target.push(i + 1);
                ex.loss.push((i + 1, i + 1));
            }
        }
        Prediction::Masked => {
            ex.inputs = plan.apply(&seq.tokens, h, fill);
            ex.content = (0..n).collect();
            ex.target = (0..n).collect();
            ex.loss = plan.masked().map(|i| (i + 1, i)).collect();
        }
    }
    (!ex.loss.is_empty()).then_some(ex)
}

/// Independent random sources of a training run.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub data: Rng,
    pub mask: Rng,
    pub fill: Rng,
    pub cond: Rng,
    pub t: Rng,
    pub noise: Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            data: Rng::new(seed, "data"),
            mask: Rng::new(seed, "mask"),
            fill: Rng::new(seed, "mask-fill"),
            cond: Rng::new(seed, "cond-drop"),
            t: Rng::new(seed, "diffusion-t"),
            noise: Rng::new(seed, "noise"),
        }
    }

    fn all(&self) -> [&Rng; 6] {
        [&self.data, &self.mask, &self.fill, &self.cond, &self.t, &self.noise]
    }

    pub fn states(&self) -> Vec<RngState> {
        self.all().iter().map(|r| r.state()).collect()
    }

    pub fn from_states(s: &[RngState]) -> Result<Self> {
        if s.len() != 6 {
            return Err(Error::Argument(format!("expected 6 generator states, got {}", s.len())));
        }
        let r = |i: usize| Rng::from_state(&s[i]);
        Ok(Self { data: r(0), mask: r(1), fill: r(2), cond: r(3), t: r(4), noise: r(5) })
    }
}

/// Adam first and second moments, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelState<f32>,
    /// `None` for an inference-only checkpoint.
    pub opt: Option<AdamState>,
    pub step: u64,
    pub rngs: TrainRngs,
    pub config: TrainConfig,
    pub diffusion: DiffusionConfig,
    /// Caller-provided configuration echoed into checkpoints.
    pub echo: serde_json::Value,
}

impl TrainState {
    pub fn new(mut model: ModelConfig, head: HeadConfig, config: TrainConfig, diffusion: DiffusionConfig) -> Result<Self> {
        config.validate()?;
        config.apply_to(&mut model);
        let model = ModelState::init(model, head, config.seed)?;
        let opt = Some(AdamState {
            m: model.params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: model.params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        });
        Ok(Self { model, opt, step: 0, rngs: TrainRngs::new(config.seed), config, diffusion, echo: serde_json::Value::Null })
    }

    pub fn inference_only(&self) -> bool {
        self.opt.is_none()
    }

    fn layout(&self) -> Result<(Layout, AttentionMode)> {
        if self.step < self.config.warmup_steps() {
            let m = TrainConfig::mar();
            return Ok((Layout { strategy: m.strategy, prediction: m.prediction, schedule: m.schedule.resolve()? }, m.attention));
        }
        let c = &self.config;
        Ok((Layout { strategy: c.strategy, prediction: c.prediction, schedule: c.schedule.resolve()? }, c.attention))
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    /// Loss slots in the batch (before repetition).
    pub slots: usize,
}

/// Assemble the batch, compute the mean diffusion loss over all loss slots
/// and apply one AdamW update.
pub fn train_step(state: &mut TrainState, batch: &[&TokenSequence], sched: &NoiseSchedule) -> Result<StepReport> {
    if state.opt.is_none() {
        return Err(Error::Capability("checkpoint is inference-only (no optimizer moments)".into()));
    }
    let (layout, mode) = state.layout()?;
    let h = state.model.config.token_dim;
    if let Some(s) = batch.iter().find(|s| s.dim != h) {
        return Err(Error::Dim(format!("token dim {} does not match model token dim {h}", s.dim)));
    }
    if batch.windows(2).any(|w| w[0].n != w[1].n) {
        return Err(Error::Argument("batch sequences must share one length".into()));
    }

    let rngs = &mut state.rngs;
    let mut examples = Vec::with_capacity(batch.len());
    for seq in batch {
        let ratio = sample_ratio(&layout.schedule, &mut rngs.mask);
        let plan = sample_plan(seq.n, ratio, layout.strategy, &mut rngs.mask);
        let fake = rngs.cond.bernoulli(state.config.cond_dropout);
        if let Some(mut ex) = layout_example(seq, &plan, layout.prediction, &mut rngs.fill) {
            ex.fake_condition = fake;
            examples.push((*seq, ex));
        }
    }
    let step = state.step + 1;
    if examples.is_empty() {
        state.step = step;
        return Ok(StepReport { step, loss: 0.0, slots: 0 });
    }

    let tape = Tape::new();
    let p = state.model.params.bind(&tape);
    let (model, rngs) = (&state.model, &mut state.rngs);
    let (loss, slots) = batch_loss(&tape, &p, &model.config, &model.head, mode, &examples, sched, state.config.head_reps, &mut rngs.t, &mut rngs.noise)?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {step}")));
    }
    let grads = tape.backward(loss)?;
    let vars = p.vars().to_vec();
    drop(p);
    let grads: Vec<Option<Vec<f32>>> = vars.iter().map(|&v| grads.get(v).map(<[f32]>::to_vec)).collect();
    drop(tape);
    adamw_update(state, &grads, step);
    state.step = step;
    Ok(StepReport { step, loss: value, slots })
}

/// Mean diffusion loss over the loss slots of `examples`, each paired with
/// the sequence its targets come from. Returns the loss and the slot count.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<T: Scalar>(
    tape: &Tape<T>,
    p: &Bound<T>,
    model: &ModelConfig,
    head: &HeadConfig,
    mode: AttentionMode,
    examples: &[(&TokenSequence, Example)],
    sched: &NoiseSchedule,
    reps: usize,
    t_rng: &mut Rng,
    noise: &mut Rng,
) -> Result<(Var, usize)> {
    let specs: Vec<SlotSpec> = examples
        .iter()
        .map(|(seq, ex)| SlotSpec {
            prefix: Some(if ex.fake_condition { Condition::Fake } else { Condition::of(seq) }),
            bos: Some(ex.bos_target),
            tokens: &ex.inputs,
            content: &ex.content,
            target: &ex.target,
        })
        .collect();
    let enc = encode_context(tape, p, model, &specs, mode)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for ((seq, ex), &off) in examples.iter().zip(&enc.offsets) {
        for &(slot, tok) in &ex.loss {
            rows.push(off + slot);
            targets.extend_from_slice(seq.token(tok));
        }
    }
    let z = tape.gather_rows(enc.z, &rows)?;
    let loss = head_loss(tape, p, head, sched, z, &targets, reps, t_rng, noise)?;
    Ok((loss, rows.len()))
}

fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

fn adamw_update(state: &mut TrainState, grads: &[Option<Vec<f32>>], step: u64) {
    let c = &state.config;
    let hyper = (c.beta1, c.beta2, c.lr, c.weight_decay);
    let opt = state.opt.as_mut().expect("checked by caller");
    adamw_apply(&mut state.model.params, opt, grads, step, hyper);
}

fn adamw_apply(params: &mut ParamSet<f32>, opt: &mut AdamState, grads: &[Option<Vec<f32>>], step: u64, (b1, b2, lr, wd): (f64, f64, f64, f64)) {
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for i in 0..params.len() {
        let decay = if decays(&params.names()[i]) { wd } else { 0.0 };
        let zero;
        let g = match &grads[i] {
            Some(g) => g.as_slice(),
            None => {
                zero = vec![0.0f32; params.tensor(i).len()];
                &zero
            }
        };
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        let w = params.tensor_mut(i).data_mut();
        for k in 0..w.len() {
            let gk = g[k] as f64;
            let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
            let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let upd = (mk / bc1) / ((vk / bc2).sqrt() + 1e-8) + decay * w[k] as f64;
            w[k] = (w[k] as f64 - lr * upd) as f32;
        }
    }
}

/// Settings for fitting a lone diffusion head to unconditional samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityFit {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Context width used by [`fit_density_head`]; the context is all zeros.
pub const DENSITY_CONTEXT_DIM: usize = 2;

/// Train a diffusion head with a constant (zero) context on `samples`
/// (rows of `c.token_dim`), so it models their marginal density. Sample
/// from the result with zero contexts of width [`DENSITY_CONTEXT_DIM`].
/// The learning rate follows a cosine decay from `fit.lr` to zero.
pub fn fit_density_head(c: &HeadConfig, samples: &[f32], sched: &NoiseSchedule, fit: &DensityFit) -> Result<ParamSet<f32>> {
    c.validate()?;
    let h = c.token_dim;
    if samples.is_empty() || !samples.len().is_multiple_of(h) || fit.batch_size == 0 {
        return Err(Error::Argument("need whole sample rows and a positive batch size".into()));
    }
    let mut params = crate::diffusion::init_head::<f32>(c, DENSITY_CONTEXT_DIM, fit.seed)?;
    let mut opt = AdamState {
        m: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        v: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
    };
    let rows = samples.len() / h;
    let mut data = Rng::new(fit.seed, "data");
    let mut t_rng = Rng::new(fit.seed, "diffusion-t");
    let mut eps = Rng::new(fit.seed, "noise");
    let d = TrainConfig::default();
    for step in 1..=fit.steps {
        let mut x = Vec::with_capacity(fit.batch_size * h);
        for _ in 0..fit.batch_size {
            let r = data.below(rows);
            x.extend_from_slice(&samples[r * h..(r + 1) * h]);
        }
        let tape = Tape::new();
        let p = params.bind(&tape);
        let z = tape.constant(Tensor::zeros(&[fit.batch_size, DENSITY_CONTEXT_DIM]));
        let loss = head_loss(&tape, &p, c, sched, z, &x, 1, &mut t_rng, &mut eps)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let grads: Vec<Option<Vec<f32>>> = p.vars().iter().map(|&v| grads.get(v).map(<[f32]>::to_vec)).collect();
        drop(p);
        let lr = fit.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / fit.steps as f64).cos());
        adamw_apply(&mut params, &mut opt, &grads, step, (d.beta1, d.beta2, lr, d.weight_decay));
    }
    Ok(params)
}

/// Draw a batch (with replacement) from the data stream.
pub fn sample_batch<'a>(state: &mut TrainState, data: &'a [TokenSequence]) -> Vec<&'a TokenSequence> {
    (0..state.config.batch_size).map(|_| &data[state.rngs.data.below(data.len())]).collect()
}

/// Run until `state.step == until`, calling `on_step` after every update.
pub fn train(state: &mut TrainState, data: &[TokenSequence], until: u64, mut on_step: impl FnMut(&TrainState, &StepReport) -> Result<()>) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let sched = NoiseSchedule::from_config(&state.diffusion)?;
    while state.step < until {
        let batch = sample_batch(state, data);
        let report = train_step(state, &batch, &sched)?;
        on_step(state, &report)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub seed: u64,
    pub model: ModelConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub diffusion: DiffusionConfig,
    pub rng: Vec<RngState>,
    /// Parameter names in model order.
    pub params: Vec<String>,
    pub tensors: BTreeMap<String, TensorEntry>,
    pub config: serde_json::Value,
}

const FORMAT: &str = "mntp-checkpoint";
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

/// Manifest and blob paths for a checkpoint stem.
pub fn checkpoint_paths(stem: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let stem = stem.as_ref();
    (sibling(stem, ".manifest.json"), sibling(stem, ".blob"))
}

/// Write `<stem>.manifest.json` and `<stem>.blob`.
pub fn save_checkpoint(state: &TrainState, stem: impl AsRef<Path>) -> Result<()> {
    let mut named: BTreeMap<String, (Vec<usize>, &[f32])> = BTreeMap::new();
    for (i, (name, t)) in state.model.params.iter().enumerate() {
        named.insert(name.to_string(), (t.shape().to_vec(), t.data()));
        if let Some(opt) = &state.opt {
            named.insert(format!("{M_PREFIX}{name}"), (t.shape().to_vec(), &opt.m[i]));
            named.insert(format!("{V_PREFIX}{name}"), (t.shape().to_vec(), &opt.v[i]));
        }
    }
    let mut blob = Vec::new();
    let mut tensors = BTreeMap::new();
    for (name, (shape, data)) in &named {
        let offset = blob.len() as u64;
        for v in *data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.insert(name.clone(), TensorEntry { shape: shape.clone(), dtype: "f32".into(), offset, length: blob.len() as u64 - offset });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        step: state.step,
        seed: state.config.seed,
        model: state.model.config.clone(),
        head: state.model.head.clone(),
        train: state.config.clone(),
        diffusion: state.diffusion.clone(),
        rng: state.rngs.states(),
        params: state.model.params.names().to_vec(),
        tensors,
        config: state.echo.clone(),
    };
    let (mpath, bpath) = checkpoint_paths(stem);
    let mut f = fs::File::create(&bpath)?;
    f.write_all(&blob)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(mpath, json)?;
    Ok(())
}

fn read_tensor(blob: &[u8], e: &TensorEntry, name: &str) -> Result<Tensor<f32>> {
    let count: usize = e.shape.iter().product();
    if e.dtype != "f32" || e.length != 4 * count as u64 {
        return Err(Error::Format { offset: e.offset, msg: format!("{name}: {} bytes of {} for shape {:?}", e.length, e.dtype, e.shape) });
    }
    let end = e.offset.checked_add(e.length).filter(|&end| end <= blob.len() as u64).ok_or_else(|| Error::Format {
        offset: e.offset,
        msg: format!("{name} extends past the blob end ({} bytes)", blob.len()),
    })?;
    let bytes = &blob[e.offset as usize..end as usize];
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(e.shape.clone(), data)
}

/// Load a checkpoint. Missing optimizer moments give an inference-only state.
pub fn load_checkpoint(stem: impl AsRef<Path>) -> Result<TrainState> {
    let (mpath, bpath) = checkpoint_paths(stem);
    let manifest: Manifest = serde_json::from_slice(&fs::read(mpath)?)?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::Format { offset: 0, msg: format!("unsupported checkpoint {} v{}", manifest.format, manifest.version) });
    }
    let blob = fs::read(bpath)?;
    let expected: u64 = manifest.tensors.values().map(|e| e.length).sum();
    if expected != blob.len() as u64 {
        return Err(Error::Format { offset: blob.len() as u64, msg: format!("manifest describes {expected} bytes, blob has {}", blob.len()) });
    }
    let mut model = ModelState::<f32>::init(manifest.model.clone(), manifest.head.clone(), manifest.seed)?;
    if model.params.names() != manifest.params.as_slice() {
        return Err(Error::Format { offset: 0, msg: "parameter list does not match the model config".into() });
    }
    let lookup = |name: &str| -> Result<Option<Tensor<f32>>> {
        manifest.tensors.get(name).map(|e| read_tensor(&blob, e, name)).transpose()
    };
    let mut ms = Vec::new();
    let mut vs = Vec::new();
    let mut complete = true;
    for name in &manifest.params {
        let t = lookup(name)?.ok_or_else(|| Error::Format { offset: 0, msg: format!("missing tensor {name}") })?;
        model.params.replace(name, t)?;
        match (lookup(&format!("{M_PREFIX}{name}"))?, lookup(&format!("{V_PREFIX}{name}"))?) {
            (Some(m), Some(v)) => {
                ms.push(m.into_data());
                vs.push(v.into_data());
            }
            _ => complete = false,
        }
    }
    Ok(TrainState {
        model,
        opt: complete.then_some(AdamState { m: ms, v: vs }),
        step: manifest.step,
        rngs: TrainRngs::from_states(&manifest.rng)?,
        config: manifest.train,
        diffusion: manifest.diffusion,
        echo: manifest.config,
    })
}
