//! Sequence generation: causal next-token decoding with a KV cache, and
//! iterative random-order unmasking for bidirectional (masked) models.
//!
//! Every output sequence decodes in its own lane with its own random
//! substream, so a sequence does not depend on what else shares the batch.
//! With guidance each lane has an unconditional twin fed the FAKE prefix
//! and the same tokens.

use serde::{Deserialize, Serialize};

use crate::codec::TokenSequence;
use crate::diffusion::{sample_rows, Guidance, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{encode_context, encode_incremental, AttentionMode, Condition, KvCache, ModelState, SlotSpec};
use crate::numerics::{Rng, Scalar, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeOrder {
    Causal,
    Random,
}

/// Order in which random-order decoding retains predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RevealOrder {
    #[default]
    Random,
    LeftToRight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingPolicy {
    pub order: DecodeOrder,
    /// Decoding rounds; equals `n` for causal order.
    pub steps: usize,
    /// Base guidance scale ω₀; `None` skips the unconditional pass.
    pub cfg: Option<f64>,
    /// Temperature on the injected sampler noise.
    pub tau: f64,
    pub n: usize,
    #[serde(default)]
    pub reveal: RevealOrder,
}

impl DecodingPolicy {
    pub fn causal(n: usize) -> Self {
        Self { order: DecodeOrder::Causal, steps: n, cfg: None, tau: 1.0, n, reveal: RevealOrder::Random }
    }

    pub fn random(n: usize, steps: usize) -> Self {
        Self { order: DecodeOrder::Random, steps, cfg: None, tau: 1.0, n, reveal: RevealOrder::Random }
    }

    pub fn with_cfg(mut self, w0: f64) -> Self {
        self.cfg = Some(w0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(m.into()));
        if self.n == 0 {
            return bad("sequence length must be at least 1");
        }
        match self.order {
            DecodeOrder::Causal if self.steps != self.n => return bad("causal decoding takes exactly n steps"),
            DecodeOrder::Causal if self.reveal != RevealOrder::Random => return bad("reveal order applies to random-order decoding only"),
            DecodeOrder::Random if self.steps == 0 || self.steps > self.n => return bad("random-order steps must lie in 1..=n"),
            _ => {}
        }
        if let Some(w) = self.cfg {
            if !(w >= 1.0 && w.is_finite()) {
                return bad("guidance scale must be finite and at least 1");
            }
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad("temperature must be finite and nonnegative");
        }
        Ok(())
    }
}

/// Guidance scale at position `i` (1-based) of `n`, decaying linearly from
/// `w0` at the first position to 1 at the last.
pub fn cfg_scale(i: usize, n: usize, w0: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::Argument(format!("guidance schedule needs n ≥ 2, got {n}")));
    }
    if i == 0 || i > n {
        return Err(Error::Range(format!("position {i} outside 1..={n}")));
    }
    Ok(1.0 + (w0 - 1.0) * (1.0 - (i - 1) as f64 / (n - 1) as f64))
}

/// Guidance at 1-based position `i`; a single-token sequence uses `w0`.
fn scale_at(i: usize, n: usize, w0: f64) -> Result<f64> {
    if n == 1 {
        Ok(w0)
    } else {
        cfg_scale(i, n, w0)
    }
}

/// Tokens retained in each round of random-order decoding. Follows a
/// cosine curve of still-masked counts, revealing at least one token per
/// round; sums to `n`.
pub fn reveal_schedule(n: usize, steps: usize) -> Result<Vec<usize>> {
    if n == 0 || steps == 0 || steps > n {
        return Err(Error::Argument(format!("need 1 ≤ steps ≤ n, got steps {steps} for n {n}")));
    }
    let mut out = Vec::with_capacity(steps);
    let mut masked = n;
    for r in 0..steps {
        let cosine = (n as f64 * (std::f64::consts::FRAC_PI_2 * (r + 1) as f64 / steps as f64).cos()).floor() as usize;
        let rounds_left = steps - 1 - r;
        let next = cosine.clamp(rounds_left, masked - 1);
        out.push(masked - next);
        masked = next;
    }
    Ok(out)
}

/// Decoded sequences plus the number of per-token diffusion-head
/// evaluations spent.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub sequences: Vec<TokenSequence>,
    pub head_evals: u64,
}

/// Decode one sequence per condition under `policy`.
pub fn decode<T: Scalar>(state: &ModelState<T>, conds: &[Condition], policy: &DecodingPolicy, sched: &NoiseSchedule, rng: &Rng) -> Result<Decoded> {
    match policy.order {
        DecodeOrder::Causal => decode_causal(state, conds, policy, sched, rng),
        DecodeOrder::Random => decode_random_order(state, conds, policy, sched, rng),
    }
}

fn lane_rngs(rng: &Rng, first: usize, count: usize, tag: &str) -> Vec<Rng> {
    (first..first + count).map(|j| rng.substream(&format!("lane/{j}/{tag}"))).collect()
}

/// [`decode`] in fixed groups of `group` sequences spread over `threads`
/// workers. Lane streams are keyed by global index and groups do not depend
/// on the thread count, so the output is the same for any `threads`.
pub fn decode_grouped<T: Scalar>(
    state: &ModelState<T>,
    conds: &[Condition],
    policy: &DecodingPolicy,
    sched: &NoiseSchedule,
    rng: &Rng,
    group: usize,
    threads: usize,
) -> Result<Decoded> {
    if group == 0 || threads == 0 {
        return Err(Error::Argument("group size and thread count must be positive".into()));
    }
    let chunks: Vec<(usize, &[Condition])> = conds.chunks(group).enumerate().map(|(g, c)| (g * group, c)).collect();
    let run = |&(first, c): &(usize, &[Condition])| match policy.order {
        DecodeOrder::Causal => causal_lanes(state, c, policy, sched, rng, first, true),
        DecodeOrder::Random => random_order_lanes(state, c, policy, sched, rng, first),
    };
    let results: Vec<Result<Decoded>> = if threads == 1 || chunks.len() <= 1 {
        chunks.iter().map(run).collect()
    } else {
        let per = chunks.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks.chunks(per).map(|part| s.spawn(move || part.iter().map(run).collect::<Vec<_>>())).collect();
            handles.into_iter().flat_map(|h| h.join().expect("decode worker panicked")).collect()
        })
    };
    let mut out = Decoded { sequences: Vec::with_capacity(conds.len()), head_evals: 0 };
    for r in results {
        let d = r?;
        out.sequences.extend(d.sequences);
        out.head_evals += d.head_evals;
    }
    Ok(out)
}

fn finish(state_cond_dim: usize, conds: &[Condition], n: usize, h: usize, tokens: Vec<Vec<f32>>) -> Result<Vec<TokenSequence>> {
    conds
        .iter()
        .zip(tokens)
        .map(|(c, t)| {
            let seq = TokenSequence::new(n, h, t)?;
            match *c {
                Condition::Real { rows, len } => seq.with_condition(len, state_cond_dim, rows.to_vec()),
                Condition::Fake => Ok(seq),
            }
        })
        .collect()
}

fn at_position(i: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("position {i}: {m}")),
        e => e,
    }
}

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.as_f64() as f32).collect()
}

/// Contexts for `lanes` conditional rows and their unconditional twins.
struct Contexts {
    cond: Vec<f32>,
    uncond: Vec<f32>,
}

fn split_contexts(z: &[f32], lanes: usize, guided: bool) -> Contexts {
    if guided {
        let half = z.len() / 2;
        debug_assert_eq!(half % lanes.max(1), 0);
        Contexts { cond: z[..half].to_vec(), uncond: z[half..].to_vec() }
    } else {
        Contexts { cond: z.to_vec(), uncond: Vec::new() }
    }
}

fn check_causal<T: Scalar>(state: &ModelState<T>, policy: &DecodingPolicy) -> Result<()> {
    policy.validate()?;
    if policy.order != DecodeOrder::Causal {
        return Err(Error::Argument("policy is not causal".into()));
    }
    if state.config.attention != AttentionMode::Causal {
        return Err(Error::Capability("causal decoding needs a causally trained model".into()));
    }
    if policy.n > state.config.max_len {
        return Err(Error::Range(format!("length {} exceeds max length {}", policy.n, state.config.max_len)));
    }
    Ok(())
}

/// Causal decoding: position `i` is sampled from the context of β and
/// tokens `0..i`, with target index `i` and guidance `ω_{i+1}`. Uses a KV
/// cache so each step feeds one new row per lane.
pub fn decode_causal<T: Scalar>(state: &ModelState<T>, conds: &[Condition], policy: &DecodingPolicy, sched: &NoiseSchedule, rng: &Rng) -> Result<Decoded> {
    causal_lanes(state, conds, policy, sched, rng, 0, true)
}

/// [`decode_causal`] without the cache: every step re-encodes the whole
/// prefix. Same random draws, so outputs agree up to float reassociation.
pub fn decode_causal_uncached<T: Scalar>(
    state: &ModelState<T>,
    conds: &[Condition],
    policy: &DecodingPolicy,
    sched: &NoiseSchedule,
    rng: &Rng,
) -> Result<Decoded> {
    causal_lanes(state, conds, policy, sched, rng, 0, false)
}

fn causal_lanes<T: Scalar>(
    state: &ModelState<T>,
    conds: &[Condition],
    policy: &DecodingPolicy,
    sched: &NoiseSchedule,
    rng: &Rng,
    first_lane: usize,
    cached: bool,
) -> Result<Decoded> {
    if !cached {
        return uncached_lanes(state, conds, policy, sched, rng, first_lane);
    }
    check_causal(state, policy)?;
    let (n, h, count) = (policy.n, state.config.token_dim, conds.len());
    let guided = policy.cfg.is_some();
    let lanes = if guided { 2 * count } else { count };
    let mut rngs = lane_rngs(rng, first_lane, count, "sample");
    let mut cache = KvCache::new(lanes, state.config.layers);
    let mut out: Vec<Vec<f32>> = vec![Vec::with_capacity(n * h); count];
    let mut evals = 0;
    for i in 0..n {
        let tape = Tape::no_grad();
        let p = state.params.bind(&tape);
        let content = [i.saturating_sub(1)];
        let target = [i];
        let specs: Vec<SlotSpec> = (0..lanes)
            .map(|l| {
                let j = l % count.max(1);
                if i == 0 {
                    let prefix = if l < count { conds[j] } else { Condition::Fake };
                    SlotSpec { prefix: Some(prefix), bos: Some(0), tokens: &[], content: &[], target: &[] }
                } else {
                    SlotSpec { prefix: None, bos: None, tokens: &out[j][(i - 1) * h..i * h], content: &content, target: &target }
                }
            })
            .collect();
        let enc = encode_incremental(&tape, &p, &state.config, &mut cache, &specs)?;
        let z = to_f32(tape.value(enc.z).data());
        drop(p);
        let ctx = split_contexts(&z, count, guided);
        let guidance = match policy.cfg {
            Some(w0) => Some(Guidance { z_uncond: &ctx.uncond, scale: scale_at(i + 1, n, w0)? }),
            None => None,
        };
        let mut rr: Vec<&mut Rng> = rngs.iter_mut().collect();
        let x = sample_rows(&state.params, &state.head, &ctx.cond, sched, &mut rr, policy.tau, guidance, &mut evals).map_err(|e| at_position(i, e))?;
        for (j, o) in out.iter_mut().enumerate() {
            o.extend_from_slice(&x[j * h..(j + 1) * h]);
        }
    }
    Ok(Decoded { sequences: finish(state.config.cond_dim, conds, n, h, out)?, head_evals: evals })
}

fn uncached_lanes<T: Scalar>(
    state: &ModelState<T>,
    conds: &[Condition],
    policy: &DecodingPolicy,
    sched: &NoiseSchedule,
    rng: &Rng,
    first_lane: usize,
) -> Result<Decoded> {
    check_causal(state, policy)?;
    let (n, h, count) = (policy.n, state.config.token_dim, conds.len());
    let guided = policy.cfg.is_some();
    let lanes = if guided { 2 * count } else { count };
    let mut rngs = lane_rngs(rng, first_lane, count, "sample");
    let mut out: Vec<Vec<f32>> = vec![Vec::with_capacity(n * h); count];
    let mut evals = 0;
    for i in 0..n {
        let tape = Tape::no_grad();
        let p = state.params.bind(&tape);
        let content: Vec<usize> = (0..i).collect();
        let target: Vec<usize> = (1..=i).collect();
        let specs: Vec<SlotSpec> = (0..lanes)
            .map(|l| {
                let j = l % count.max(1);
                let prefix = if l < count { conds[j] } else { Condition::Fake };
                SlotSpec { prefix: Some(prefix), bos: Some(0), tokens: &out[j], content: &content, target: &target }
            })
            .collect();
        let enc = encode_context(&tape, &p, &state.config, &specs, AttentionMode::Causal)?;
        let rows: Vec<usize> = enc.offsets.iter().map(|o| o + i).collect();
        let z = to_f32(tape.value(tape.gather_rows(enc.z, &rows)?).data());
        drop(p);
        let ctx = split_contexts(&z, count, guided);
        let guidance = match policy.cfg {
            Some(w0) => Some(Guidance { z_uncond: &ctx.uncond, scale: scale_at(i + 1, n, w0)? }),
            None => None,
        };
        let mut rr: Vec<&mut Rng> = rngs.iter_mut().collect();
        let x = sample_rows(&state.params, &state.head, &ctx.cond, sched, &mut rr, policy.tau, guidance, &mut evals).map_err(|e| at_position(i, e))?;
        for (j, o) in out.iter_mut().enumerate() {
            o.extend_from_slice(&x[j * h..(j + 1) * h]);
        }
    }
    Ok(Decoded { sequences: finish(state.config.cond_dim, conds, n, h, out)?, head_evals: evals })
}

/// Random-order decoding of a bidirectional model: start from all-zero
/// tokens, predict every masked slot each round, and keep the number given
/// by [`reveal_schedule`], in a per-lane random order (or left to right).
pub fn decode_random_order<T: Scalar>(
    state: &ModelState<T>,
    conds: &[Condition],
    policy: &DecodingPolicy,
    sched: &NoiseSchedule,
    rng: &Rng,
) -> Result<Decoded> {
    random_order_lanes(state, conds, policy, sched, rng, 0)
}

fn random_order_lanes<T: Scalar>(
    state: &ModelState<T>,
    conds: &[Condition],
    policy: &DecodingPolicy,
    sched: &NoiseSchedule,
    rng: &Rng,
    first_lane: usize,
) -> Result<Decoded> {
    policy.validate()?;
    if policy.order != DecodeOrder::Random {
        return Err(Error::Argument("policy is not random-order".into()));
    }
    if state.config.attention != AttentionMode::Bidirectional {
        return Err(Error::Capability("random-order decoding needs a model trained on masked prediction".into()));
    }
    let (n, h, count) = (policy.n, state.config.token_dim, conds.len());
    if n > state.config.max_len {
        return Err(Error::Range(format!("length {n} exceeds max length {}", state.config.max_len)));
    }
    let guided = policy.cfg.is_some();
    let lanes = if guided { 2 * count } else { count };
    let schedule = reveal_schedule(n, policy.steps)?;
    let mut rngs = lane_rngs(rng, first_lane, count, "sample");
    let orders: Vec<Vec<usize>> = match policy.reveal {
        RevealOrder::LeftToRight => vec![(0..n).collect(); count],
        RevealOrder::Random => lane_rngs(rng, first_lane, count, "order")
            .into_iter()
            .map(|mut r| {
                let mut o: Vec<usize> = (0..n).collect();
                for k in (1..n).rev() {
                    o.swap(k, r.below(k + 1));
                }
                o
            })
            .collect(),
    };
    let positions: Vec<usize> = (0..n).collect();
    let mut out: Vec<Vec<f32>> = vec![vec![0.0; n * h]; count];
    let mut revealed = 0;
    let mut evals = 0;
    for &k in &schedule {
        let tape = Tape::no_grad();
        let p = state.params.bind(&tape);
        let specs: Vec<SlotSpec> = (0..lanes)
            .map(|l| {
                let j = l % count.max(1);
                let prefix = if l < count { conds[j] } else { Condition::Fake };
                SlotSpec { prefix: Some(prefix), bos: Some(0), tokens: &out[j], content: &positions, target: &positions }
            })
            .collect();
        let enc = encode_context(&tape, &p, &state.config, &specs, AttentionMode::Bidirectional)?;
        let rows: Vec<usize> = (0..lanes)
            .flat_map(|l| {
                let off = enc.offsets[l];
                orders[l % count.max(1)][revealed..revealed + k].iter().map(move |&pos| off + 1 + pos)
            })
            .collect();
        let z = to_f32(tape.value(tape.gather_rows(enc.z, &rows)?).data());
        drop(p);
        let ctx = split_contexts(&z, count * k, guided);
        let guidance = match policy.cfg {
            Some(w0) => Some(Guidance { z_uncond: &ctx.uncond, scale: scale_at(revealed + 1, n, w0)? }),
            None => None,
        };
        let mut rr: Vec<&mut Rng> = rngs.iter_mut().collect();
        let x =sample_lane_blocks(state, &ctx, sched, &mut rr, k, policy.tau, guidance, &mut evals).map_err(|e| at_position(revealed, e))?;
        for (j, o) in out.iter_mut().enumerate() {
            for (q, &pos) in orders[j][revealed..revealed + k].iter().enumerate() {
                o[pos * h..(pos + 1) * h].copy_from_slice(&x[(j * k + q) * h..(j * k + q + 1) * h]);
            }
        }
        revealed += k;
    }
    Ok(Decoded { sequences: finish(state.config.cond_dim, conds, n, h, out)?, head_evals: evals })
}

/// Sample `k` rows per lane, each lane drawing from its own stream.
#[allow(clippy::too_many_arguments)]
fn sample_lane_blocks<T: Scalar>(
    state: &ModelState<T>,
    ctx: &Contexts,
    sched: &NoiseSchedule,
    lanes: &mut [&mut Rng],
    k: usize,
    tau: f64,
    guidance: Option<Guidance>,
    evals: &mut u64,
) -> Result<Vec<f32>> {
    // Rows of one lane share its stream; the sampler takes one stream per
    // row, so hand out per-row substreams derived from the lane stream.
    let mut per_row: Vec<Rng> = Vec::with_capacity(lanes.len() * k);
    for r in lanes.iter_mut() {
        let seed = r.next_u64();
        let base = Rng::new(seed, "reveal");
        per_row.extend((0..k).map(|q| base.substream(&q.to_string())));
    }
    let mut rr: Vec<&mut Rng> = per_row.iter_mut().collect();
    sample_rows(&state.params, &state.head, &ctx.cond, sched, &mut rr, tau, guidance, evals)
}
