//! Evaluation: Fréchet distance between Gaussian fits of token sets,
//! held-out teacher-forced diffusion loss, statistics against a known
//! gaussian-ar process, and real-time-factor timing.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codec::{SyntheticProcess, TokenSequence};
use crate::decode::{decode, DecodingPolicy};
use crate::diffusion::{head_context, head_forward, head_time, NoiseSchedule};
use crate::error::{Error, Result};
use crate::masking::{MaskPlan, MaskStrategy};
use crate::model::{encode_context, AttentionMode, Condition, ModelState, SlotSpec};
use crate::numerics::{Rng, Scalar, Tape, Tensor};
use crate::trainer::{layout_example, Prediction};

/// Mean and covariance of a set of vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// `dim × dim`, row-major.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    /// Checked constructor: `cov` must be symmetric and PSD within 1e-8.
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::Dim(format!("covariance has {} entries for dim {d}", cov.len())));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[i * d + j] - cov[j * d + i]).abs() > 1e-8 {
                    return Err(Error::Argument(format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        let min = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov)).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if d > 0 && min < -1e-8 {
            return Err(Error::Argument(format!("covariance has eigenvalue {min}")));
        }
        Ok(Self { mean, cov, count })
    }

    /// Fit to `rows.len() / dim` vectors; unbiased (N − 1) covariance.
    pub fn from_rows(dim: usize, rows: &[f64]) -> Result<Self> {
        if dim == 0 || !rows.len().is_multiple_of(dim) {
            return Err(Error::Dim(format!("{} values are not rows of dim {dim}", rows.len())));
        }
        let n = rows.len() / dim;
        if n < 2 {
            return Err(Error::Argument("need at least two samples for a covariance".into()));
        }
        let mut mean = vec![0.0; dim];
        for r in rows.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; dim * dim];
        for r in rows.chunks_exact(dim) {
            for i in 0..dim {
                let di = r[i] - mean[i];
                for j in i..dim {
                    cov[i * dim + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] / (n - 1) as f64;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        Ok(Self { mean, cov, count: n })
    }

    /// Fit to every token of every sequence.
    pub fn from_sequences(seqs: &[TokenSequence]) -> Result<Self> {
        let dim = seqs.first().map_or(0, |s| s.dim);
        if seqs.iter().any(|s| s.dim != dim) {
            return Err(Error::Dim("sequences disagree on token dim".into()));
        }
        let rows: Vec<f64> = seqs.iter().flat_map(|s| s.tokens.iter().map(|&v| v as f64)).collect();
        Self::from_rows(dim, &rows)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`, with
/// negative eigenvalues clamped at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::Argument(format!("dimension mismatch: {d} vs {}", b.dim())));
    }
    let mean: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let ra = psd_sqrt(&sa);
    let mut m = &ra * &sb * &ra;
    m = (&m + m.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((mean + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

fn record_key(seq: &TokenSequence) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: &[u8]| {
        for &x in b {
            h ^= x as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    eat(&(seq.n as u64).to_le_bytes());
    eat(&(seq.dim as u64).to_le_bytes());
    for v in seq.tokens.iter().chain(&seq.condition) {
        eat(&v.to_bits().to_le_bytes());
    }
    format!("{h:016x}")
}

const EVAL_CHUNK: usize = 32;

/// Teacher-forced diffusion loss on held-out sequences: every position sees
/// its full past and the real condition; `reps` `(t, ε)` draws per token.
/// Draws are keyed by record content, so the value does not depend on
/// record order. Returns the mean of `‖ε − ε̂‖²` over all token draws.
pub fn heldout_diffusion_loss<T: Scalar>(state: &ModelState<T>, data: &[TokenSequence], sched: &NoiseSchedule, seed: u64, reps: usize) -> Result<f64> {
    if state.config.attention != AttentionMode::Causal {
        return Err(Error::Capability("teacher-forced loss needs a causal model".into()));
    }
    if reps == 0 || data.is_empty() {
        return Err(Error::Argument("need at least one record and one repetition".into()));
    }
    let h = state.config.token_dim;
    if let Some(s) = data.iter().find(|s| s.dim != h) {
        return Err(Error::Dim(format!("token dim {} does not match model token dim {h}", s.dim)));
    }
    let base = Rng::new(seed, "heldout");
    let mut per_record: Vec<(f64, usize)> = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_CHUNK) {
        let mut unused = Rng::new(0, "unused");
        let examples: Vec<_> = chunk
            .iter()
            .map(|seq| {
                let plan = MaskPlan::from_visible(vec![true; seq.n], MaskStrategy::None);
                layout_example(seq, &plan, Prediction::Next, &mut unused).ok_or_else(|| Error::Argument("empty sequence".into()))
            })
            .collect::<Result<_>>()?;
        let tape = Tape::no_grad();
        let p = state.params.bind(&tape);
        let specs: Vec<SlotSpec> = chunk
            .iter()
            .zip(&examples)
            .map(|(seq, ex)| SlotSpec {
                prefix: Some(Condition::of(seq)),
                bos: Some(ex.bos_target),
                tokens: &ex.inputs,
                content: &ex.content,
                target: &ex.target,
            })
            .collect();
        let enc = encode_context(&tape, &p, &state.config, &specs, AttentionMode::Causal)?;
        let mut rows = Vec::new();
        let mut t = Vec::new();
        let mut xt = Vec::new();
        let mut eps = Vec::new();
        let mut owners = Vec::new();
        for (r, ((seq, ex), &off)) in chunk.iter().zip(&examples).zip(&enc.offsets).enumerate() {
            let mut rng = base.substream(&record_key(seq));
            for _ in 0..reps {
                for &(slot, tok) in &ex.loss {
                    let ti = 1 + rng.below(sched.t_train);
                    let ab = sched.alpha_bar[ti];
                    let e = rng.normal_vec(h);
                    for (x, ek) in seq.token(tok).iter().zip(&e) {
                        xt.push(T::of(ab.sqrt() * *x as f64 + (1.0 - ab).sqrt() * ek));
                    }
                    eps.extend(e);
                    rows.push(off + slot);
                    t.push(ti);
                    owners.push(r);
                }
            }
        }
        let z = tape.gather_rows(enc.z, &rows)?;
        let ctx = head_context(&tape, &p, z)?;
        let time = head_time(&tape, &p, &state.head, &t)?;
        let xv = tape.constant(Tensor::new(vec![rows.len(), h], xt)?);
        let pred = tape.value(head_forward(&tape, &p, &state.head, xv, ctx, time)?);
        let mut sums = vec![(0.0, 0usize); chunk.len()];
        for (i, &r) in owners.iter().enumerate() {
            let se: f64 = pred.row(i).iter().zip(&eps[i * h..(i + 1) * h]).map(|(a, b)| (a.as_f64() - b).powi(2)).sum();
            sums[r].0 += se;
            sums[r].1 += 1;
        }
        per_record.extend(sums);
    }
    let mut totals: Vec<f64> = per_record.iter().map(|s| s.0).collect();
    totals.sort_by(f64::total_cmp);
    let count: usize = per_record.iter().map(|s| s.1).sum();
    let loss = totals.iter().sum::<f64>() / count as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("held-out loss is not finite".into()));
    }
    Ok(loss)
}

/// Least-squares fit of `xⁱ = A xⁱ⁻¹ + b_k` with one offset per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArFit {
    /// `dim × dim`, row-major.
    pub transition: Vec<f64>,
    pub offsets: Vec<Vec<f64>>,
}

/// Fit the lag-1 transition and per-class offsets over all consecutive
/// token pairs. Sequences without a condition count as class 0.
pub fn fit_ar_transition(seqs: &[TokenSequence]) -> Result<ArFit> {
    let d = seqs.first().map_or(0, |s| s.dim);
    if d == 0 || seqs.iter().any(|s| s.dim != d) {
        return Err(Error::Dim("sequences need one positive token dim".into()));
    }
    let label = |s: &TokenSequence| s.class_label().unwrap_or(0);
    let classes = seqs.iter().map(label).max().unwrap_or(0) + 1;
    let pairs: usize = seqs.iter().map(|s| s.n.saturating_sub(1)).sum();
    let f = d + classes;
    if pairs < f {
        return Err(Error::Argument(format!("{pairs} token pairs cannot determine {f} coefficients")));
    }
    let mut x = DMatrix::<f64>::zeros(pairs, f);
    let mut y = DMatrix::<f64>::zeros(pairs, d);
    let mut r = 0;
    for s in seqs {
        let k = label(s);
        for i in 1..s.n {
            for c in 0..d {
                x[(r, c)] = s.token(i - 1)[c] as f64;
                y[(r, c)] = s.token(i)[c] as f64;
            }
            x[(r, d + k)] = 1.0;
            r += 1;
        }
    }
    let beta = x.svd(true, true).solve(&y, 1e-12).map_err(|e| Error::Numeric(format!("least squares failed: {e}")))?;
    let transition = (0..d * d).map(|i| beta[(i % d, i / d)]).collect();
    let offsets = (0..classes).map(|k| (0..d).map(|c| beta[(d + k, c)]).collect()).collect();
    Ok(ArFit { transition, offsets })
}

pub fn frobenius_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Distance of generated token moments from a gaussian-ar process's
/// stationary ones, over positions `≥ burn_in`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentError {
    /// Mean over classes of `‖μ̂_k − μ_k‖`.
    pub mean: f64,
    /// `‖Σ̂ − Σ‖_F` for the pooled within-class covariance.
    pub cov: f64,
}

pub fn stationary_moment_error(seqs: &[TokenSequence], proc: &SyntheticProcess, burn_in: usize) -> Result<MomentError> {
    let d = proc.dim;
    if seqs.iter().any(|s| s.dim != d) {
        return Err(Error::Dim("sequence token dim differs from the process".into()));
    }
    let k = proc.classes();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for s in seqs {
        let c = s.class_label().unwrap_or(0).min(k - 1);
        for i in burn_in..s.n {
            for (a, v) in sums[c].iter_mut().zip(s.token(i)) {
                *a += *v as f64;
            }
            counts[c] += 1;
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    let total: usize = counts.iter().sum();
    if total <= present.len() {
        return Err(Error::Argument("too few tokens past the burn-in".into()));
    }
    let means: Vec<Vec<f64>> = (0..k).map(|c| sums[c].iter().map(|v| v / counts[c].max(1) as f64).collect()).collect();
    let mean = present.iter().map(|&c| frobenius_distance(&means[c], &proc.stationary_mean(c))).sum::<f64>() / present.len() as f64;
    let mut cov = vec![0.0; d * d];
    for s in seqs {
        let c = s.class_label().unwrap_or(0).min(k - 1);
        for i in burn_in..s.n {
            let t = s.token(i);
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += (t[a] as f64 - means[c][a]) * (t[b] as f64 - means[c][b]);
                }
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= (total - present.len()) as f64);
    Ok(MomentError { mean, cov: frobenius_distance(&cov, &proc.stationary_cov()) })
}

/// Wall-clock timing of batch-1 decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfMeasurement {
    pub rtf: f64,
    pub clip_seconds: f64,
    /// Seconds of each timed run.
    pub runs: Vec<f64>,
}

/// Decode one sequence once to warm up, then time five runs; RTF is the
/// median decode time over `clip_seconds`.
pub fn measure_rtf<T: Scalar>(
    state: &ModelState<T>,
    policy: &DecodingPolicy,
    sched: &NoiseSchedule,
    cond: Condition,
    clip_seconds: f64,
    rng: &Rng,
) -> Result<RtfMeasurement> {
    if !(clip_seconds > 0.0 && clip_seconds.is_finite()) {
        return Err(Error::Argument("clip length must be positive".into()));
    }
    decode(state, &[cond], policy, sched, rng)?;
    let mut runs = Vec::with_capacity(5);
    for r in 0..5 {
        let rng = rng.substream(&format!("run/{r}"));
        let start = Instant::now();
        decode(state, &[cond], policy, sched, &rng)?;
        runs.push(start.elapsed().as_secs_f64());
    }
    let mut sorted = runs.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(RtfMeasurement { rtf: sorted[2] / clip_seconds, clip_seconds, runs })
}

/// Metrics of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub latent_fd: f64,
    pub heldout_diff_loss: Option<f64>,
    /// `‖Â − A‖_F` of the lag-1 fit on generated sequences.
    pub ar_coef_error: Option<f64>,
    pub moment_error: Option<MomentError>,
    pub rtf: Option<f64>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let mut fields = vec![("latent_fd", Some(self.latent_fd)), ("heldout_diff_loss", self.heldout_diff_loss), ("ar_coef_error", self.ar_coef_error), ("rtf", self.rtf)];
        if let Some(m) = self.moment_error {
            fields.push(("moment_error.mean", Some(m.mean)));
            fields.push(("moment_error.cov", Some(m.cov)));
        }
        match fields.iter().find(|(_, v)| v.is_some_and(|v| !v.is_finite())) {
            Some((name, _)) => Err(Error::Numeric(format!("report field {name} is not finite"))),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }
}
