//! Token-wise diffusion head: noise schedule, denoising loss, and the
//! reverse sampler with classifier-free guidance and temperature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{spec, Bound, Init, ParamSet, ParamSpec};
use crate::numerics::{Rng, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub token_dim: usize,
    /// Residual MLP blocks.
    pub layers: usize,
    pub width: usize,
    pub time_dim: usize,
}

impl HeadConfig {
    pub fn new(token_dim: usize, layers: usize, width: usize, time_dim: usize) -> Self {
        Self { token_dim, layers, width, time_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Argument("head needs at least one MLP block".into()));
        }
        if self.width == 0 || self.token_dim == 0 || self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Argument("head width, token dim and an even time dim must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn head_param_specs(c: &HeadConfig, hidden: usize) -> Vec<ParamSpec> {
    let (w, h, e) = (c.width, c.token_dim, c.time_dim);
    let mut s = vec![
        spec("head.z_norm.g", &[hidden], Init::Ones),
        spec("head.z_norm.b", &[hidden], Init::Zeros),
        spec("head.cond.w", &[hidden, w], Init::Xavier),
        spec("head.cond.b", &[w], Init::Zeros),
        spec("head.time.fc1.w", &[e, w], Init::Normal(0.02)),
        spec("head.time.fc1.b", &[w], Init::Zeros),
        spec("head.time.fc2.w", &[w, w], Init::Normal(0.02)),
        spec("head.time.fc2.b", &[w], Init::Zeros),
        spec("head.in.w", &[h, w], Init::Xavier),
        spec("head.in.b", &[w], Init::Zeros),
    ];
    for l in 0..c.layers {
        let p = |n: &str| format!("head.block.{l}.{n}");
        s.extend([
            spec(p("shift.w"), &[w, w], Init::Zeros),
            spec(p("shift.b"), &[w], Init::Zeros),
            spec(p("fc1.w"), &[w, w], Init::Xavier),
            spec(p("fc1.b"), &[w], Init::Zeros),
            spec(p("fc2.w"), &[w, w], Init::Xavier),
            spec(p("fc2.b"), &[w], Init::Zeros),
        ]);
    }
    s.extend([
        spec("head.final.shift.w", &[w, w], Init::Zeros),
        spec("head.final.shift.b", &[w], Init::Zeros),
        spec("head.out.w", &[w, h], Init::Zeros),
        spec("head.out.b", &[h], Init::Zeros),
    ]);
    s
}

/// Standalone head weights (no decoder), e.g. for fitting a density with a
/// constant context.
pub fn init_head<T: Scalar>(c: &HeadConfig, context_dim: usize, seed: u64) -> Result<ParamSet<T>> {
    c.validate()?;
    let mut set = ParamSet::default();
    crate::model::init_params(&mut set, head_param_specs(c, context_dim), &Rng::new(seed, "init"))?;
    Ok(set)
}

/// Reverse-process variance choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variance {
    /// `σ² = (1−ᾱ_{t−1})/(1−ᾱ_t)·(1−α_t)`.
    Posterior,
    /// `σ² = 1−α_t`.
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub train_steps: usize,
    pub inference_steps: usize,
    pub variance: Variance,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { train_steps: 1000, inference_steps: 100, variance: Variance::Posterior }
    }
}

/// Cosine schedule tables over `0..=T` plus a strided inference subset.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_train: usize,
    /// `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Ascending timesteps visited by the sampler (see [`respace`]).
    pub inference: Vec<usize>,
    pub variance: Variance,
}

impl NoiseSchedule {
    /// Cosine schedule with offset `s = 0.008`; per-step betas are capped at
    /// 0.999 so every `α_t` stays positive.
    pub fn cosine(t_train: usize, inference_steps: usize) -> Result<Self> {
        Self::from_config(&DiffusionConfig { train_steps: t_train, inference_steps, variance: Variance::Posterior })
    }

    pub fn from_config(c: &DiffusionConfig) -> Result<Self> {
        let t_train = c.train_steps;
        if t_train == 0 || c.inference_steps == 0 || c.inference_steps > t_train {
            return Err(Error::Argument(format!("need 1 ≤ inference steps ({}) ≤ T ({t_train})", c.inference_steps)));
        }
        let s = 0.008;
        let f = |t: f64| (((t / t_train as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let mut alpha_bar = vec![1.0];
        let mut alpha = vec![1.0];
        for t in 1..=t_train {
            let beta = (1.0 - f(t as f64) / f((t - 1) as f64)).min(0.999);
            alpha.push(1.0 - beta);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        let sigma = (0..=t_train)
            .map(|t| if t == 0 { 0.0 } else { step_sigma(c.variance, alpha_bar[t], alpha_bar[t - 1]) })
            .collect();
        let inference = respace(t_train, c.inference_steps);
        Ok(Self { t_train, alpha_bar, alpha, sigma, inference, variance: c.variance })
    }

    /// `(ᾱ_t, ᾱ_prev)` pairs for the sampler, from the last step down.
    fn reverse_steps(&self) -> Vec<(usize, f64, f64)> {
        (0..self.inference.len())
            .rev()
            .map(|j| {
                let t = self.inference[j];
                let prev = if j == 0 { 1.0 } else { self.alpha_bar[self.inference[j - 1]] };
                (t, self.alpha_bar[t], prev)
            })
            .collect()
    }
}

fn step_sigma(v: Variance, ab: f64, ab_prev: f64) -> f64 {
    let a = ab / ab_prev;
    match v {
        Variance::Posterior => ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - a)).sqrt(),
        Variance::Beta => (1.0 - a).sqrt(),
    }
}

/// `steps` timesteps `1 + ⌊i·T/steps⌋`: evenly strided from 1, stopping one
/// stride short of T. Starting the chain at ᾱ_T ≈ 0 would divide the first
/// update by `√(ᾱ_T/ᾱ_prev)` and amplify any noise-prediction error.
pub fn respace(t_train: usize, steps: usize) -> Vec<usize> {
    (0..steps.min(t_train)).map(|i| 1 + i * t_train / steps.min(t_train)).collect()
}

/// `x_t = √ᾱ_t·x + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(x: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if t == 0 || t > sched.t_train {
        return Err(Error::Range(format!("timestep {t} outside 1..={}", sched.t_train)));
    }
    if x.len() != eps.len() {
        return Err(Error::Dim(format!("token has {} values, noise {}", x.len(), eps.len())));
    }
    let ab = sched.alpha_bar[t];
    Ok(x.iter().zip(eps).map(|(&x, &e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect())
}

/// Sinusoidal embedding of each timestep, `[len, dim]`.
pub fn time_embedding(t: &[usize], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &t in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        out.extend(args.iter().map(|a| a.cos()));
        out.extend(args.iter().map(|a| a.sin()));
    }
    out
}

/// Context projection `W_z · LN(z)`, `[rows, width]`.
pub fn head_context<T: Scalar>(tape: &Tape<T>, p: &Bound<T>, z: Var) -> Result<Var> {
    let zn = tape.layer_norm(z, Some((p.var("head.z_norm.g")?, p.var("head.z_norm.b")?)))?;
    tape.linear(zn, p.var("head.cond.w")?, Some(p.var("head.cond.b")?))
}

/// Time conditioning, `[t.len(), width]`.
pub fn head_time<T: Scalar>(tape: &Tape<T>, p: &Bound<T>, c: &HeadConfig, t: &[usize]) -> Result<Var> {
    let e = Tensor::new(vec![t.len(), c.time_dim], time_embedding(t, c.time_dim).into_iter().map(T::of).collect())?;
    let e = tape.constant(e);
    let h = tape.silu(tape.linear(e, p.var("head.time.fc1.w")?, Some(p.var("head.time.fc1.b")?))?);
    tape.linear(h, p.var("head.time.fc2.w")?, Some(p.var("head.time.fc2.b")?))
}

/// Noise prediction for `x_t: [rows, h]` given the projected context and
/// time conditioning (`[rows, width]`, or `[width]` to share one timestep).
pub fn head_forward<T: Scalar>(tape: &Tape<T>, p: &Bound<T>, c: &HeadConfig, x_t: Var, ctx: Var, time: Var) -> Result<Var> {
    let cond = tape.add(ctx, time)?;
    let act = tape.silu(cond);
    let mut h = tape.linear(x_t, p.var("head.in.w")?, Some(p.var("head.in.b")?))?;
    h = tape.add(h, cond)?;
    for l in 0..c.layers {
        let v = |n: &str| p.var(&format!("head.block.{l}.{n}"));
        let shift = tape.linear(act, v("shift.w")?, Some(v("shift.b")?))?;
        let y = tape.add(tape.layer_norm(h, None)?, shift)?;
        let y = tape.silu(tape.linear(y, v("fc1.w")?, Some(v("fc1.b")?))?);
        let y = tape.linear(y, v("fc2.w")?, Some(v("fc2.b")?))?;
        h = tape.add(h, y)?;
    }
    let shift = tape.linear(act, p.var("head.final.shift.w")?, Some(p.var("head.final.shift.b")?))?;
    let y = tape.add(tape.layer_norm(h, None)?, shift)?;
    tape.linear(y, p.var("head.out.w")?, Some(p.var("head.out.b")?))
}

/// Denoising loss `mean ‖ε − ε̂(x_t, z, t)‖²` for targets `x: [rows, h]`,
/// with `reps` independent `(t, ε)` draws per row. `t` is uniform over
/// `1..=T` from `t_rng`, `ε` comes from `eps_rng`.
#[allow(clippy::too_many_arguments)]
pub fn head_loss<T: Scalar>(
    tape: &Tape<T>,
    p: &Bound<T>,
    c: &HeadConfig,
    sched: &NoiseSchedule,
    z: Var,
    x: &[f32],
    reps: usize,
    t_rng: &mut Rng,
    eps_rng: &mut Rng,
) -> Result<Var> {
    let h = c.token_dim;
    let base = tape.shape(z)[0];
    if x.len() != base * h {
        return Err(Error::Dim(format!("{} target values for {base} context rows of token dim {h}", x.len())));
    }
    let rows = base * reps;
    let t: Vec<usize> = (0..rows).map(|_| 1 + t_rng.below(sched.t_train)).collect();
    let eps = eps_rng.normal_vec(rows * h);
    let mut xt = Vec::with_capacity(rows * h);
    for r in 0..rows {
        let ab = sched.alpha_bar[t[r]];
        let xr = &x[(r % base) * h..(r % base + 1) * h];
        for k in 0..h {
            xt.push(T::of(ab.sqrt() * xr[k] as f64 + (1.0 - ab).sqrt() * eps[r * h + k]));
        }
    }
    let xt = tape.constant(Tensor::new(vec![rows, h], xt)?);
    let eps = tape.constant(Tensor::new(vec![rows, h], eps.into_iter().map(T::of).collect())?);
    let ctx = head_context(tape, p, z)?;
    let ctx = if reps == 1 { ctx } else { tape.gather_rows(ctx, &(0..rows).map(|r| r % base).collect::<Vec<_>>())? };
    let time = head_time(tape, p, c, &t)?;
    let pred = head_forward(tape, p, c, xt, ctx, time)?;
    let mse = tape.mse(pred, eps)?;
    Ok(tape.scale(mse, h as f64))
}

/// Guidance for [`sample_token`]: unconditional contexts and scale ω.
#[derive(Debug, Clone, Copy)]
pub struct Guidance<'a> {
    pub z_uncond: &'a [f32],
    pub scale: f64,
}

/// Reverse diffusion from `x_T ~ N(0, I)` for each context row of `z`
/// (`rows × hidden`). With guidance, `ε̂ = ε_c + ω(ε_c − ε_u)`; both passes see
/// the same `x_t` and draws. `tau` scales the injected noise. Returns
/// `rows × token_dim` clean tokens.
pub fn sample_token<T: Scalar>(
    params: &ParamSet<T>,
    c: &HeadConfig,
    z: &[f32],
    sched: &NoiseSchedule,
    rng: &mut Rng,
    tau: f64,
    guidance: Option<Guidance>,
) -> Result<Vec<f32>> {
    let ctx_dim = params.get("head.z_norm.g")?.len();
    let x_start = rng.normal_vec(z.len() / ctx_dim.max(1) * c.token_dim);
    reverse_diffuse(params, c, z, x_start, sched, rng, tau, guidance)
}

/// The reverse chain of [`sample_token`] from a given `x_T`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_diffuse<T: Scalar>(
    params: &ParamSet<T>,
    c: &HeadConfig,
    z: &[f32],
    x_start: Vec<f64>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    tau: f64,
    guidance: Option<Guidance>,
) -> Result<Vec<f32>> {
    let mut evals = 0;
    reverse_chain(params, c, z, x_start, sched, tau, guidance, &mut |buf| rng.fill_normal(buf), &mut evals)
}

/// [`sample_token`] with one random stream per row, so a row's draws do not
/// depend on which other rows share the batch. Adds the number of per-row
/// head evaluations to `evals`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sample_rows<T: Scalar>(
    params: &ParamSet<T>,
    c: &HeadConfig,
    z: &[f32],
    sched: &NoiseSchedule,
    rngs: &mut [&mut Rng],
    tau: f64,
    guidance: Option<Guidance>,
    evals: &mut u64,
) -> Result<Vec<f32>> {
    let h = c.token_dim;
    let mut x_start = vec![0.0; rngs.len() * h];
    for (rng, chunk) in rngs.iter_mut().zip(x_start.chunks_mut(h)) {
        rng.fill_normal(chunk);
    }
    let mut noise = |buf: &mut [f64]| {
        for (rng, chunk) in rngs.iter_mut().zip(buf.chunks_mut(h)) {
            rng.fill_normal(chunk);
        }
    };
    reverse_chain(params, c, z, x_start, sched, tau, guidance, &mut noise, evals)
}

#[allow(clippy::too_many_arguments)]
fn reverse_chain<T: Scalar>(
    params: &ParamSet<T>,
    c: &HeadConfig,
    z: &[f32],
    x_start: Vec<f64>,
    sched: &NoiseSchedule,
    tau: f64,
    guidance: Option<Guidance>,
    noise: &mut dyn FnMut(&mut [f64]),
    evals: &mut u64,
) -> Result<Vec<f32>> {
    let h = c.token_dim;
    let ctx_dim = params.get("head.z_norm.g")?.len();
    if !z.len().is_multiple_of(ctx_dim) {
        return Err(Error::Dim(format!("{} context values not a multiple of {ctx_dim}", z.len())));
    }
    let rows = z.len() / ctx_dim;
    if x_start.len() != rows * h {
        return Err(Error::Dim(format!("start has {} values for {rows} rows of dim {h}", x_start.len())));
    }
    if let Some(g) = guidance {
        if g.z_uncond.len() != z.len() {
            return Err(Error::Dim("unconditional contexts must match conditional ones".into()));
        }
    }
    if rows == 0 {
        return Ok(Vec::new());
    }
    // Context projections are fixed across steps.
    let zs: Vec<f32> = match guidance {
        Some(g) => z.iter().chain(g.z_uncond).copied().collect(),
        None => z.to_vec(),
    };
    let lanes = zs.len() / ctx_dim;
    let ctx = {
        let tape = Tape::no_grad();
        let p = params.bind(&tape);
        let zv = tape.constant(Tensor::new(vec![lanes, ctx_dim], zs.iter().map(|&v| T::of(v as f64)).collect())?);
        tape.value(head_context(&tape, &p, zv)?)
    };

    let mut x = x_start;
    let mut delta = vec![0.0; rows * h];
    for (t, ab, ab_prev) in sched.reverse_steps() {
        let tape = Tape::no_grad();
        let p = params.bind(&tape);
        let time = tape.value(head_time(&tape, &p, c, &[t])?);
        let time = tape.constant(Tensor::new(vec![c.width], time.data().to_vec())?);
        let xin: Vec<T> = match guidance {
            Some(_) => x.iter().chain(x.iter()).map(|&v| T::of(v)).collect(),
            None => x.iter().map(|&v| T::of(v)).collect(),
        };
        let xv = tape.constant(Tensor::new(vec![lanes, h], xin)?);
        let cv = tape.constant_shared(std::sync::Arc::clone(&ctx));
        let eps = tape.value(head_forward(&tape, &p, c, xv, cv, time)?);
        *evals += lanes as u64;
        let e = eps.data();
        let a = ab / ab_prev;
        let coef = (1.0 - a) / (1.0 - ab).sqrt();
        let sigma = if ab_prev == 1.0 { 0.0 } else { step_sigma(sched.variance, ab, ab_prev) };
        noise(&mut delta);
        for i in 0..rows * h {
            let ec = e[i].as_f64();
            let eh = match guidance {
                Some(g) => {
                    let eu = e[rows * h + i].as_f64();
                    ec + g.scale * (ec - eu)
                }
                None => ec,
            };
            x[i] = (x[i] - coef * eh) / a.sqrt() + sigma * tau * delta[i];
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value in row {} at diffusion step t={t}", i / h)));
        }
    }
    Ok(x.into_iter().map(|v| v as f32).collect())
}
