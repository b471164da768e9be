//! Transformer decoder producing one context vector per input slot.
//!
//! The packed input of a sequence is `[condition prefix] ++ [β] ++ tokens`.
//! Token slots carry a content position (which token they hold) and a
//! target position (which token they are asked to predict); both index
//! learned tables with `max_len` rows. β has no content position.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codec::TokenSequence;
use crate::diffusion::{head_param_specs, HeadConfig};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar, Segment, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Longest token sequence (rows of each positional table).
    pub max_len: usize,
    pub token_dim: usize,
    pub cond_dim: usize,
    pub prefix_len: usize,
    pub attention: AttentionMode,
    pub target_pos_emb: bool,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl ModelConfig {
    /// `mini`, `small`, and the full-size `base` / `large` shapes. Token and
    /// condition geometry are supplied by the caller.
    pub fn preset(name: &str, token_dim: usize, cond_dim: usize, max_len: usize) -> Result<Self> {
        let (layers, hidden, heads) = match name {
            "mini" => (4, 128, 4),
            "small" => (8, 256, 8),
            "base" => (24, 768, 12),
            "large" => (32, 1024, 16),
            other => return Err(Error::Argument(format!("unknown model preset {other:?}"))),
        };
        Ok(Self {
            layers,
            hidden,
            heads,
            max_len,
            token_dim,
            cond_dim,
            prefix_len: 2,
            attention: AttentionMode::Causal,
            target_pos_emb: true,
            mlp_ratio: 4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Argument(format!("hidden {} not divisible by {} heads", self.hidden, self.heads)));
        }
        if self.hidden == 0 || self.token_dim == 0 || self.max_len == 0 || self.mlp_ratio == 0 {
            return Err(Error::Argument("model dimensions must be positive".into()));
        }
        if self.prefix_len > 0 && self.cond_dim == 0 {
            return Err(Error::Argument("a condition prefix needs cond_dim > 0".into()));
        }
        Ok(())
    }

    /// Scalar parameter count of the decoder alone.
    pub fn param_count(&self) -> usize {
        decoder_param_specs(self).iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub(crate) fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec { name: name.into(), shape: shape.to_vec(), init }
}

fn decoder_param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let d = c.hidden;
    let f = c.hidden * c.mlp_ratio;
    let mut s = vec![
        spec("tok.w", &[c.token_dim, d], Init::Xavier),
        spec("tok.b", &[d], Init::Zeros),
        spec("pos.content", &[c.max_len, d], Init::Normal(0.02)),
    ];
    if c.target_pos_emb {
        s.push(spec("pos.target", &[c.max_len, d], Init::Normal(0.02)));
    }
    s.push(spec("bos", &[1, d], Init::Normal(0.02)));
    if c.prefix_len > 0 {
        s.extend([
            spec("cond.w", &[c.cond_dim, d], Init::Xavier),
            spec("cond.b", &[d], Init::Zeros),
            spec("cond.pos", &[c.prefix_len, d], Init::Normal(0.02)),
            spec("cond.pad", &[1, d], Init::Normal(0.02)),
            spec("cond.fake", &[c.prefix_len, c.cond_dim], Init::Normal(0.02)),
        ]);
    }
    for l in 0..c.layers {
        let p = |n: &str| format!("block.{l}.{n}");
        s.extend([
            spec(p("ln1.g"), &[d], Init::Ones),
            spec(p("ln1.b"), &[d], Init::Zeros),
            spec(p("qkv.w"), &[d, 3 * d], Init::Xavier),
            spec(p("qkv.b"), &[3 * d], Init::Zeros),
            spec(p("proj.w"), &[d, d], Init::Xavier),
            spec(p("proj.b"), &[d], Init::Zeros),
            spec(p("ln2.g"), &[d], Init::Ones),
            spec(p("ln2.b"), &[d], Init::Zeros),
            spec(p("fc1.w"), &[d, f], Init::Xavier),
            spec(p("fc1.b"), &[f], Init::Zeros),
            spec(p("fc2.w"), &[f, d], Init::Xavier),
            spec(p("fc2.b"), &[d], Init::Zeros),
        ]);
    }
    s
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(Arc::new(t));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor<T>>> {
        self.position(name).map(|i| &self.tensors[i]).ok_or_else(|| Error::Argument(format!("missing parameter {name}")))
    }

    pub fn tensor(&self, i: usize) -> &Arc<Tensor<T>> {
        &self.tensors[i]
    }

    /// Mutable access; clones the storage if a tape still shares it.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn replace(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let i = self.position(name).ok_or_else(|| Error::Argument(format!("missing parameter {name}")))?;
        if self.tensors[i].shape() != t.shape() {
            return Err(Error::Dim(format!("{name}: shape {:?} vs {:?}", self.tensors[i].shape(), t.shape())));
        }
        self.tensors[i] = Arc::new(t);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor<T>>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Register every tensor as a differentiable leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &Tape<T>) -> Bound<'a, T> {
        Bound { set: self, vars: self.tensors.iter().map(|t| tape.param(Arc::clone(t))).collect() }
    }
}

/// A [`ParamSet`] registered on a tape.
pub struct Bound<'a, T> {
    set: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Bound<'_, T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.set.position(name).map(|i| self.vars[i]).ok_or_else(|| Error::Argument(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub(crate) fn init_params<T: Scalar>(set: &mut ParamSet<T>, specs: Vec<ParamSpec>, rng: &Rng) -> Result<()> {
    for s in specs {
        let n: usize = s.shape.iter().product();
        let mut r = rng.substream(&s.name);
        let data: Vec<T> = match s.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(std) => (0..n).map(|_| T::of(std * r.normal())).collect(),
            Init::Xavier => {
                let fan_out = *s.shape.last().unwrap_or(&1);
                let fan_in = if s.shape.len() > 1 { s.shape[0] } else { 1 };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| T::of(a * (2.0 * r.uniform() - 1.0))).collect()
            }
        };
        set.insert(s.name, Tensor::new(s.shape, data)?)?;
    }
    Ok(())
}

/// Decoder and diffusion-head weights.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub head: HeadConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> ModelState<T> {
    pub fn init(config: ModelConfig, head: HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        head.validate()?;
        let rng = Rng::new(seed, "init");
        let mut params = ParamSet::default();
        init_params(&mut params, decoder_param_specs(&config), &rng)?;
        init_params(&mut params, head_param_specs(&head, config.hidden), &rng)?;
        Ok(Self { config, head, params })
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState { config: self.config.clone(), head: self.head.clone(), params: self.params.cast() }
    }
}

/// Condition supplied to the prefix.
#[derive(Debug, Clone, Copy)]
pub enum Condition<'a> {
    /// `len` rows of width `cond_dim`, row-major.
    Real { rows: &'a [f32], len: usize },
    /// The learned fake latent used for unconditional prediction.
    Fake,
}

impl<'a> Condition<'a> {
    pub fn of(seq: &'a TokenSequence) -> Self {
        Condition::Real { rows: &seq.condition, len: seq.cond_len }
    }
}

/// One packed input sequence (or, for cached decoding, the rows appended
/// to one lane).
#[derive(Debug, Clone, Copy)]
pub struct SlotSpec<'a> {
    /// Emit the condition prefix first.
    pub prefix: Option<Condition<'a>>,
    /// Emit β with this target index.
    pub bos: Option<usize>,
    /// `content.len() × token_dim` input tokens.
    pub tokens: &'a [f32],
    pub content: &'a [usize],
    pub target: &'a [usize],
}

/// Where each sequence's slots landed in the packed rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowSpan {
    pub start: usize,
    pub prefix: usize,
    pub slots: usize,
}

impl RowSpan {
    pub fn len(&self) -> usize {
        self.prefix + self.slots
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Context vectors for all non-prefix slots, in sequence order.
pub struct Encoded {
    pub z: Var,
    /// Offset of each sequence's first slot within `z`.
    pub offsets: Vec<usize>,
    pub spans: Vec<RowSpan>,
}

fn check_spec(c: &ModelConfig, s: &SlotSpec) -> Result<()> {
    let m = s.content.len();
    if s.target.len() != m || s.tokens.len() != m * c.token_dim {
        return Err(Error::Dim(format!(
            "{} token values, {} content and {} target indices for token dim {}",
            s.tokens.len(),
            m,
            s.target.len(),
            c.token_dim
        )));
    }
    if let Some(&i) = s.content.iter().find(|&&i| i >= c.max_len) {
        return Err(Error::Range(format!("content index {i} ≥ max length {}", c.max_len)));
    }
    if c.target_pos_emb {
        if let Some(&i) = s.target.iter().chain(s.bos.iter()).find(|&&i| i >= c.max_len) {
            return Err(Error::Range(format!("target index {i} ≥ max length {}", c.max_len)));
        }
    }
    if let Some(Condition::Real { rows, len }) = s.prefix {
        if rows.len() != len * c.cond_dim && len > 0 {
            return Err(Error::Dim(format!("condition has {} values for {len} rows of width {}", rows.len(), c.cond_dim)));
        }
    }
    Ok(())
}

fn to_tensor<T: Scalar>(shape: Vec<usize>, data: impl Iterator<Item = f32>) -> Result<Tensor<T>> {
    Tensor::new(shape, data.map(|v| T::of(v as f64)).collect())
}

/// Embed prefix, β and token rows of every sequence into one packed matrix.
pub(crate) fn embed<T: Scalar>(tape: &Tape<T>, p: &Bound<T>, c: &ModelConfig, seqs: &[SlotSpec]) -> Result<(Var, Vec<RowSpan>)> {
    for s in seqs {
        check_spec(c, s)?;
    }
    let d = c.hidden;
    // sources: (var, rows); picks index into this list
    let mut srcs: Vec<Var> = Vec::new();

    // token rows
    let tok_count: usize = seqs.iter().map(|s| s.content.len()).sum();
    let tok_src = if tok_count > 0 {
        let x = tape.constant(to_tensor(vec![tok_count, c.token_dim], seqs.iter().flat_map(|s| s.tokens.iter().copied()))?);
        let mut t = tape.linear(x, p.var("tok.w")?, Some(p.var("tok.b")?))?;
        let content: Vec<usize> = seqs.iter().flat_map(|s| s.content.iter().copied()).collect();
        t = tape.add(t, tape.gather_rows(p.var("pos.content")?, &content)?)?;
        if c.target_pos_emb {
            let target: Vec<usize> = seqs.iter().flat_map(|s| s.target.iter().copied()).collect();
            t = tape.add(t, tape.gather_rows(p.var("pos.target")?, &target)?)?;
        }
        srcs.push(t);
        Some(srcs.len() - 1)
    } else {
        None
    };

    // β rows
    let bos_targets: Vec<usize> = seqs.iter().filter_map(|s| s.bos).collect();
    let bos_src = if !bos_targets.is_empty() {
        let mut b = tape.gather_rows(p.var("bos")?, &vec![0; bos_targets.len()])?;
        if c.target_pos_emb {
            b = tape.add(b, tape.gather_rows(p.var("pos.target")?, &bos_targets)?)?;
        }
        srcs.push(b);
        Some(srcs.len() - 1)
    } else {
        None
    };

    // prefix rows: real rows and fake rows go through the shared projection,
    // missing rows use the padding embedding
    let mut real_rows: Vec<f32> = Vec::new();
    let mut proj_picks: Vec<(usize, usize)> = Vec::new(); // (0 = real, 1 = fake), row
    let mut proj_slot: Vec<usize> = Vec::new();
    let mut pad_slot: Vec<usize> = Vec::new();
    // per sequence, per prefix slot: (is_pad, index within its group)
    let mut prefix_rows: Vec<Vec<(bool, usize)>> = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut rows = Vec::new();
        if let Some(cond) = s.prefix {
            for j in 0..c.prefix_len {
                match cond {
                    Condition::Real { rows: r, len } if j < len => {
                        proj_picks.push((0, real_rows.len() / c.cond_dim));
                        real_rows.extend_from_slice(&r[j * c.cond_dim..(j + 1) * c.cond_dim]);
                        proj_slot.push(j);
                        rows.push((false, proj_picks.len() - 1));
                    }
                    Condition::Fake => {
                        proj_picks.push((1, j));
                        proj_slot.push(j);
                        rows.push((false, proj_picks.len() - 1));
                    }
                    Condition::Real { .. } => {
                        pad_slot.push(j);
                        rows.push((true, pad_slot.len() - 1));
                    }
                }
            }
        }
        prefix_rows.push(rows);
    }
    let proj_src = if !proj_picks.is_empty() {
        let fake = p.var("cond.fake")?;
        let real = if real_rows.is_empty() {
            fake // placeholder source, never picked
        } else {
            tape.constant(to_tensor(vec![real_rows.len() / c.cond_dim, c.cond_dim], real_rows.iter().copied())?)
        };
        let inputs = tape.assemble_rows(&[real, fake], &proj_picks)?;
        let e = tape.linear(inputs, p.var("cond.w")?, Some(p.var("cond.b")?))?;
        srcs.push(tape.add(e, tape.gather_rows(p.var("cond.pos")?, &proj_slot)?)?);
        Some(srcs.len() - 1)
    } else {
        None
    };
    let pad_src = if !pad_slot.is_empty() {
        let pad = tape.gather_rows(p.var("cond.pad")?, &vec![0; pad_slot.len()])?;
        srcs.push(tape.add(pad, tape.gather_rows(p.var("cond.pos")?, &pad_slot)?)?);
        Some(srcs.len() - 1)
    } else {
        None
    };

    let mut picks = Vec::new();
    let mut spans = Vec::with_capacity(seqs.len());
    let (mut tok_i, mut bos_i) = (0, 0);
    for (s, rows) in seqs.iter().zip(&prefix_rows) {
        let start = picks.len();
        for &(is_pad, i) in rows {
            picks.push(if is_pad { (pad_src.expect("pad rows"), i) } else { (proj_src.expect("prefix rows"), i) });
        }
        if s.bos.is_some() {
            picks.push((bos_src.expect("bos rows"), bos_i));
            bos_i += 1;
        }
        for _ in 0..s.content.len() {
            picks.push((tok_src.expect("token rows"), tok_i));
            tok_i += 1;
        }
        spans.push(RowSpan { start, prefix: rows.len(), slots: picks.len() - start - rows.len() });
    }
    if picks.is_empty() {
        return Err(Error::Argument("nothing to encode".into()));
    }
    let x = tape.assemble_rows(&srcs, &picks)?;
    debug_assert_eq!(tape.shape(x), vec![picks.len(), d]);
    Ok((x, spans))
}

/// Pre-norm residual blocks; `attend` maps `[rows, 3d]` qkv to `[rows, d]`.
pub(crate) fn run_blocks<T: Scalar>(
    tape: &Tape<T>,
    p: &Bound<T>,
    c: &ModelConfig,
    mut h: Var,
    mut attend: impl FnMut(&Tape<T>, usize, Var) -> Result<Var>,
) -> Result<Var> {
    for l in 0..c.layers {
        let v = |n: &str| p.var(&format!("block.{l}.{n}"));
        let a = tape.layer_norm(h, Some((v("ln1.g")?, v("ln1.b")?)))?;
        let qkv = tape.linear(a, v("qkv.w")?, Some(v("qkv.b")?))?;
        let o = attend(tape, l, qkv)?;
        let o = tape.linear(o, v("proj.w")?, Some(v("proj.b")?))?;
        h = tape.add(h, o)?;
        let m = tape.layer_norm(h, Some((v("ln2.g")?, v("ln2.b")?)))?;
        let m = tape.gelu(tape.linear(m, v("fc1.w")?, Some(v("fc1.b")?))?);
        let m = tape.linear(m, v("fc2.w")?, Some(v("fc2.b")?))?;
        h = tape.add(h, m)?;
    }
    Ok(h)
}

fn slot_rows(spans: &[RowSpan]) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut offsets = Vec::with_capacity(spans.len());
    for s in spans {
        offsets.push(rows.len());
        rows.extend(s.start + s.prefix..s.start + s.len());
    }
    (rows, offsets)
}

/// Full forward pass over packed sequences. Each sequence attends only
/// within itself; `mode` selects causal or bidirectional attention.
pub fn encode_context<T: Scalar>(tape: &Tape<T>, p: &Bound<T>, c: &ModelConfig, seqs: &[SlotSpec], mode: AttentionMode) -> Result<Encoded> {
    let (x, spans) = embed(tape, p, c, seqs)?;
    let segs: Vec<Segment> = spans.iter().filter(|s| !s.is_empty()).map(|s| Segment { start: s.start, len: s.len() }).collect();
    let causal = mode == AttentionMode::Causal;
    let h = run_blocks(tape, p, c, x, |t, _, qkv| t.attention(qkv, &segs, c.heads, causal))?;
    let (rows, offsets) = slot_rows(&spans);
    let z = tape.gather_rows(h, &rows)?;
    Ok(Encoded { z, offsets, spans })
}

/// Embedded prefix rows for one condition (or FAKE), `[prefix_len, hidden]`.
pub fn condition_prefix<T: Scalar>(state: &ModelState<T>, cond: Condition) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let p = state.params.bind(&tape);
    let spec = SlotSpec { prefix: Some(cond), bos: None, tokens: &[], content: &[], target: &[] };
    let (x, _) = embed(&tape, &p, &state.config, &[spec])?;
    Ok((*tape.value(x)).clone())
}

/// Keys and values of every row seen so far, per lane and layer.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    lanes: Vec<LaneCache<T>>,
}

#[derive(Debug, Clone, Default)]
struct LaneCache<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(lanes: usize, layers: usize) -> Self {
        Self { lanes: (0..lanes).map(|_| LaneCache { k: vec![Vec::new(); layers], v: vec![Vec::new(); layers], len: 0 }).collect() }
    }

    pub fn lanes(&self) -> usize {
        self.lanes.len()
    }

    pub fn lane_len(&self, lane: usize) -> usize {
        self.lanes[lane].len
    }
}

/// Causal forward pass over rows appended to each lane, attending to the
/// lane's cached rows. `seqs[i]` extends lane `i`. Returns context vectors
/// for the new non-prefix slots.
pub fn encode_incremental<T: Scalar>(tape: &Tape<T>, p: &Bound<T>, c: &ModelConfig, cache: &mut KvCache<T>, seqs: &[SlotSpec]) -> Result<Encoded> {
    if seqs.len() != cache.lanes.len() {
        return Err(Error::Dim(format!("{} specs for {} cached lanes", seqs.len(), cache.lanes.len())));
    }
    let (x, spans) = embed(tape, p, c, seqs)?;
    let d = c.hidden;
    let dh = d / c.heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let h = run_blocks(tape, p, c, x, |t, layer, qkv| {
        let qv = t.value(qkv);
        let q = qv.data();
        let mut out = vec![T::zero(); qv.rows() * d];
        for (lane, span) in cache.lanes.iter_mut().zip(&spans) {
            for r in span.start..span.start + span.len() {
                let row = &q[r * 3 * d..(r + 1) * 3 * d];
                lane.k[layer].extend_from_slice(&row[d..2 * d]);
                lane.v[layer].extend_from_slice(&row[2 * d..]);
            }
            let base = lane.k[layer].len() / d - span.len();
            for (i, r) in (span.start..span.start + span.len()).enumerate() {
                let visible = base + i + 1;
                for hd in 0..c.heads {
                    let qh = &q[r * 3 * d + hd * dh..r * 3 * d + (hd + 1) * dh];
                    let mut s: Vec<T> = (0..visible)
                        .map(|j| {
                            let kh = &lane.k[layer][j * d + hd * dh..j * d + (hd + 1) * dh];
                            qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<T>() * scale
                        })
                        .collect();
                    crate::numerics::softmax_rows_in_place(&mut s, visible, false);
                    let o = &mut out[r * d + hd * dh..r * d + (hd + 1) * dh];
                    for (j, &w) in s.iter().enumerate() {
                        let vh = &lane.v[layer][j * d + hd * dh..j * d + (hd + 1) * dh];
                        for (oo, &vv) in o.iter_mut().zip(vh) {
                            *oo += w * vv;
                        }
                    }
                }
            }
        }
        Ok(t.constant(Tensor::new(vec![qv.rows(), d], out)?))
    })?;
    for (lane, span) in cache.lanes.iter_mut().zip(&spans) {
        lane.len += span.len();
    }
    let (rows, offsets) = slot_rows(&spans);
    let z = tape.gather_rows(h, &rows)?;
    Ok(Encoded { z, offsets, spans })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: usize, target: bool) -> ModelState<f64> {
        let c = ModelConfig {
            layers,
            hidden: 8,
            heads: 2,
            max_len: 6,
            token_dim: 3,
            cond_dim: 2,
            prefix_len: 2,
            attention: AttentionMode::Causal,
            target_pos_emb: target,
            mlp_ratio: 2,
        };
        ModelState::init(c, HeadConfig::new(3, 1, 8, 4), 7).unwrap()
    }

    fn tokens(m: usize) -> Vec<f32> {
        (0..m * 3).map(|i| (i as f32 * 0.37).sin()).collect()
    }

    #[test]
    fn hidden_must_divide_heads() {
        let mut c = tiny(1, true).config;
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_layer_output_is_the_embedding() {
        let s = tiny(0, true);
        let tape = Tape::no_grad();
        let p = s.params.bind(&tape);
        let toks = tokens(2);
        let cond = [1.0f32, 0.0];
        let spec = SlotSpec { prefix: Some(Condition::Real { rows: &cond, len: 1 }), bos: Some(0), tokens: &toks, content: &[0, 1], target: &[1, 2] };
        let enc = encode_context(&tape, &p, &s.config, &[spec], AttentionMode::Causal).unwrap();
        let (x, spans) = embed(&tape, &p, &s.config, &[spec]).unwrap();
        assert_eq!(spans[0], RowSpan { start: 0, prefix: 2, slots: 3 });
        let z = tape.value(enc.z);
        let x = tape.value(x);
        assert_eq!(z.data(), &x.data()[2 * 8..]);
    }

    #[test]
    fn index_overflow_is_range_error() {
        let s = tiny(1, true);
        let tape = Tape::no_grad();
        let p = s.params.bind(&tape);
        let toks = tokens(1);
        let spec = SlotSpec { prefix: None, bos: Some(0), tokens: &toks, content: &[6], target: &[1] };
        assert!(matches!(encode_context(&tape, &p, &s.config, &[spec], AttentionMode::Causal), Err(Error::Range(_))));
    }

    #[test]
    fn fake_prefix_ignores_condition() {
        let s = tiny(1, true);
        let a = condition_prefix(&s, Condition::Fake).unwrap();
        assert_eq!(a.shape(), &[2, 8]);
        let cond = [0.3f32, 0.1, 0.2, 0.9];
        let b = condition_prefix(&s, Condition::Real { rows: &cond, len: 2 }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn long_condition_is_truncated_and_empty_is_padding() {
        let s = tiny(1, true);
        let two = [0.3f32, 0.1, 0.2, 0.9];
        let three = [0.3f32, 0.1, 0.2, 0.9, 5.0, 5.0];
        let a = condition_prefix(&s, Condition::Real { rows: &two, len: 2 }).unwrap();
        let b = condition_prefix(&s, Condition::Real { rows: &three, len: 3 }).unwrap();
        assert_eq!(a, b);
        let e = condition_prefix(&s, Condition::Real { rows: &[], len: 0 }).unwrap();
        let pad = s.params.get("cond.pad").unwrap();
        let pos = s.params.get("cond.pos").unwrap();
        for j in 0..2 {
            for k in 0..8 {
                assert_eq!(e.row(j)[k], pad.data()[k] + pos.row(j)[k]);
            }
        }
    }

    #[test]
    fn cached_rows_match_full_pass() {
        let s = tiny(2, true).cast::<f32>();
        let toks = tokens(3);
        let cond = [1.0f32, 0.0];
        let full = SlotSpec { prefix: Some(Condition::Real { rows: &cond, len: 1 }), bos: Some(0), tokens: &toks, content: &[0, 1, 2], target: &[1, 2, 3] };
        let tape = Tape::no_grad();
        let p = s.params.bind(&tape);
        let enc = encode_context(&tape, &p, &s.config, &[full], AttentionMode::Causal).unwrap();
        let want = tape.value(enc.z);

        let mut cache = KvCache::new(1, 2);
        let mut got = Vec::new();
        let first = SlotSpec { prefix: Some(Condition::Real { rows: &cond, len: 1 }), bos: Some(0), tokens: &[], content: &[], target: &[] };
        let e = encode_incremental(&tape, &p, &s.config, &mut cache, &[first]).unwrap();
        got.extend_from_slice(tape.value(e.z).data());
        for i in 0..3 {
            let step = SlotSpec { prefix: None, bos: None, tokens: &toks[i * 3..(i + 1) * 3], content: &[i], target: &[i + 1] };
            let e = encode_incremental(&tape, &p, &s.config, &mut cache, &[step]).unwrap();
            got.extend_from_slice(tape.value(e.z).data());
        }
        assert_eq!(cache.lane_len(0), 6);
        for (a, b) in got.iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }
}
