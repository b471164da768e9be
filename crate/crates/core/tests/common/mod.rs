//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use mntp::codec::{gen_synthetic, SyntheticProcess, TokenSequence};
use mntp::diffusion::{DiffusionConfig, HeadConfig, NoiseSchedule};
use mntp::masking::{sample_plan, MaskStrategy};
use mntp::model::{AttentionMode, ModelConfig, ModelState, ParamSet};
use mntp::numerics::{rel_err, Rng, Tape};
use mntp::trainer::{batch_loss, layout_example, Example, Prediction};
use statrs::distribution::{ContinuousCDF, Normal};

/// Eigenpairs of a symmetric `n × n` row-major matrix by cyclic Jacobi
/// rotations. Returns (values, row-major eigenvector columns).
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                out[i * n + j] += a[i * n + k] * b[k * n + j];
            }
        }
    }
    out
}

/// Square root of a symmetric PSD matrix via [`jacobi_eigen`].
pub fn sqrt_psd(a: &[f64], n: usize) -> Vec<f64> {
    let (vals, vecs) = jacobi_eigen(a, n);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| vecs[i * n + k] * vals[k].max(0.0).sqrt() * vecs[j * n + k]).sum();
        }
    }
    out
}

/// Fréchet distance between two Gaussians with Jacobi square roots.
pub fn fd_oracle(m1: &[f64], c1: &[f64], m2: &[f64], c2: &[f64]) -> f64 {
    let n = m1.len();
    let r1 = sqrt_psd(c1, n);
    let inner = matmul(&matmul(&r1, c2, n), &r1, n);
    let sym: Vec<f64> = (0..n * n).map(|k| 0.5 * (inner[k] + inner[(k % n) * n + k / n])).collect();
    let cross = sqrt_psd(&sym, n);
    let mean: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b).powi(2)).sum();
    mean + (0..n).map(|i| c1[i * n + i] + c2[i * n + i] - 2.0 * cross[i * n + i]).sum::<f64>()
}

/// Random symmetric positive-definite matrix `B Bᵀ + 0.1 I`.
pub fn random_spd(n: usize, rng: &mut Rng) -> Vec<f64> {
    let b = rng.normal_vec(n * n);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
        }
    }
    out
}

/// Kolmogorov–Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// CDF of `N(mean, std²)` restricted to `[lo, hi]`.
pub fn truncated_normal_cdf(mean: f64, std: f64, lo: f64, hi: f64) -> impl Fn(f64) -> f64 {
    let n = Normal::new(mean, std).unwrap();
    let (a, b) = (n.cdf(lo), n.cdf(hi));
    move |x| ((n.cdf(x.clamp(lo, hi)) - a) / (b - a)).clamp(0.0, 1.0)
}

/// Solve `Σ = AΣAᵀ + σ²I` directly: `(I − A⊗A) vec Σ = σ² vec I`.
pub fn lyapunov(a: &[f64], sigma: f64, d: usize) -> Vec<f64> {
    let m = d * d;
    let big = nalgebra::DMatrix::from_fn(m, m, |r, c| {
        let (i, j) = (r / d, r % d);
        let (k, l) = (c / d, c % d);
        let id = if r == c { 1.0 } else { 0.0 };
        id - a[i * d + k] * a[j * d + l]
    });
    let rhs = nalgebra::DVector::from_fn(m, |r, _| if r / d == r % d { sigma * sigma } else { 0.0 });
    big.lu().solve(&rhs).unwrap().iter().copied().collect()
}

/// Gaussian-AR benchmark: dim 4, 3 classes, spectral radius 0.8.
pub struct Benchmark {
    pub process: SyntheticProcess,
    pub train: Vec<TokenSequence>,
    pub heldout: Vec<TokenSequence>,
}

pub fn gaussian_ar_benchmark(seed: u64, length: usize, train: usize, heldout: usize) -> Benchmark {
    let mut rng = Rng::new(seed, "benchmark/process");
    let process = SyntheticProcess::random_gaussian_ar(4, 3, 0.8, 1.0, 0.5, &mut rng).unwrap();
    let mut rng = Rng::new(seed, "benchmark/train");
    let train = (0..train).map(|i| gen_synthetic(&process, length, i % 3, &mut rng).unwrap()).collect();
    let mut rng = Rng::new(seed, "benchmark/heldout");
    let heldout = (0..heldout).map(|i| gen_synthetic(&process, length, i % 3, &mut rng).unwrap()).collect();
    Benchmark { process, train, heldout }
}

/// Result of the end-to-end gradient check.
#[derive(Debug)]
pub struct ModelGradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: String,
}

fn mini_examples(data: &[TokenSequence]) -> Vec<(&TokenSequence, Example)> {
    let mut rng = Rng::new(9, "gradcheck/plan");
    let mut fill = Rng::new(9, "gradcheck/fill");
    let mntp = sample_plan(data[0].n, 0.4, MaskStrategy::Drop, &mut rng);
    let ntp = sample_plan(data[1].n, 0.0, MaskStrategy::Drop, &mut rng);
    let a = layout_example(&data[0], &mntp, Prediction::Skip, &mut fill).unwrap();
    let mut b = layout_example(&data[1], &ntp, Prediction::Next, &mut fill).unwrap();
    b.fake_condition = true;
    vec![(&data[0], a), (&data[1], b)]
}

/// Training loss of the `mini` decoder plus diffusion head in 64-bit,
/// reverse-mode gradient vs central differences with step `h`, over
/// `per_tensor` coordinates of every parameter tensor (the largest-gradient
/// coordinate plus random ones).
pub fn mini_model_gradcheck(h: f64, per_tensor: usize) -> ModelGradCheck {
    let bench = gaussian_ar_benchmark(3, 6, 2, 0);
    let model = ModelConfig::preset("mini", 4, 3, 8).unwrap();
    let head = HeadConfig::new(4, 3, 32, 16);
    let mut state = ModelState::<f64>::init(model, head, 5).unwrap();
    // move layer-norm gains and biases off their initial constants
    let mut perturb = Rng::new(5, "gradcheck/perturb");
    for i in 0..state.params.len() {
        let name = state.params.names()[i].clone();
        if name.ends_with(".b") || name.ends_with(".g") {
            for v in state.params.tensor_mut(i).data_mut() {
                *v += 0.1 * perturb.normal();
            }
        }
    }
    let sched = NoiseSchedule::from_config(&DiffusionConfig::default()).unwrap();
    let examples = mini_examples(&bench.train);
    let rngs = (Rng::new(1, "gradcheck/t"), Rng::new(1, "gradcheck/noise"));
    let loss = |params: &ParamSet<f64>| -> f64 {
        let tape = Tape::no_grad();
        let p = params.bind(&tape);
        let (mut t, mut e) = rngs.clone();
        let (l, _) = batch_loss(&tape, &p, &state.config, &state.head, AttentionMode::Causal, &examples, &sched, 2, &mut t, &mut e).unwrap();
        tape.value(l).item()
    };

    let tape = Tape::new();
    let p = state.params.bind(&tape);
    let (mut t, mut e) = rngs.clone();
    let (l, _) = batch_loss(&tape, &p, &state.config, &state.head, AttentionMode::Causal, &examples, &sched, 2, &mut t, &mut e).unwrap();
    let grads = tape.backward(l).unwrap();
    let analytic: Vec<Vec<f64>> = p.vars().iter().zip(state.params.iter()).map(|(&v, (_, t))| grads.get(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec)).collect();
    drop(p);

    let mut pick = Rng::new(2, "gradcheck/coords");
    let mut params = state.params.clone();
    let mut out = ModelGradCheck { max_rel_err: 0.0, checked: 0, worst: String::new() };
    for (i, g) in analytic.iter().enumerate() {
        let argmax = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
        let mut coords = vec![argmax];
        coords.extend((1..per_tensor).map(|_| pick.below(g.len())));
        for k in coords {
            let orig = params.tensor(i).data()[k];
            params.tensor_mut(i).data_mut()[k] = orig + h;
            let up = loss(&params);
            params.tensor_mut(i).data_mut()[k] = orig - h;
            let down = loss(&params);
            params.tensor_mut(i).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(g[k], numeric);
            out.checked += 1;
            if err > out.max_rel_err {
                out.max_rel_err = err;
                out.worst = format!("{}[{k}]: analytic {:e}, numeric {numeric:e}", state.params.names()[i], g[k]);
            }
        }
    }
    out
}
