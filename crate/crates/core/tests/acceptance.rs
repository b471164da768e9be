//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Failures are reported, not enforced; set `MNTP_ACCEPTANCE_STRICT=1` to
//! exit nonzero when any criterion fails. `MNTP_ACCEPTANCE_ONLY=1,5,9`
//! restricts the run to the listed criteria.

mod common;

use std::time::Instant;

use common::{fd_oracle, ks_statistic, random_spd, truncated_normal_cdf, Benchmark};
use mntp::codec::{tokenize, unflatten_unpatchify, FramePadding, Geometry, LatentMap, TokenSequence};
use mntp::decode::{cfg_scale, decode, DecodingPolicy, RevealOrder};
use mntp::diffusion::{sample_token, DiffusionConfig, Guidance, HeadConfig, NoiseSchedule};
use mntp::eval::{fit_ar_transition, frechet_distance, frobenius_distance, heldout_diffusion_loss, measure_rtf, stationary_moment_error, GaussianStats};
use mntp::masking::{gclm_mask, sample_ratio, MaskPlan, MaskSchedule, MaskStrategy};
use mntp::model::{Condition, ModelConfig, ModelState};
use mntp::numerics::Rng;
use mntp::trainer::{fit_density_head, layout_example, load_checkpoint, save_checkpoint, train, DensityFit, Prediction, TrainConfig, TrainState, DENSITY_CONTEXT_DIM};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let r = common::mini_model_gradcheck(1e-3, 3);
    let secs = start.elapsed().as_secs_f64();
    outcome(r.max_rel_err < 1e-3 && secs < 120.0, format!("max rel err {:.2e} over {} coordinates, worst {} ({secs:.1} s)", r.max_rel_err, r.checked, r.worst))
}

fn codec_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(0, "acceptance/codec");
    let mut geoms = vec![Geometry::audio_10s()];
    while geoms.len() < 100 {
        let patch = 1 + rng.below(4);
        let frames = 1 + rng.below(48);
        let padding = if rng.bernoulli(0.5) { FramePadding::ToPatch } else { FramePadding::ToLength(frames.div_ceil(patch) * patch + patch * rng.below(3)) };
        geoms.push(Geometry { frames, bands: patch * (1 + rng.below(8)), channels: 1 + rng.below(8), patch, padding });
    }
    let mut failures = 0;
    for g in &geoms {
        let values: Vec<f32> = (0..g.frames * g.bands * g.channels).map(|_| (rng.normal() * 5.0) as f32).collect();
        let map = LatentMap::new(g.frames, g.bands, g.channels, values).unwrap();
        let seq = tokenize(&map, g).unwrap();
        let back = unflatten_unpatchify(&seq, g).unwrap();
        if back.frames != map.frames || bits(&back.values) != bits(&map.values) {
            failures += 1;
        }
    }
    let audio = tokenize(&LatentMap::zeros(250, 16, 8), &geoms[0]).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = failures == 0 && (audio.n, audio.dim) == (256, 128) && secs < 10.0;
    outcome(pass, format!("{failures} mismatches over {} geometries, audio geometry n={} h={} ({secs:.2} s)", geoms.len(), audio.n, audio.dim))
}

fn noise_schedule() -> Outcome {
    let s = NoiseSchedule::cosine(1000, 100).unwrap();
    let decreasing = s.alpha_bar.windows(2).all(|w| w[1] < w[0]);
    let pass = decreasing && s.alpha_bar[1000] < 0.01 && s.alpha_bar[1] > 0.999;
    outcome(pass, format!("strictly decreasing {decreasing}, ᾱ_1 = {:.6}, ᾱ_T = {:.3e}", s.alpha_bar[1], s.alpha_bar[1000]))
}

fn density_model() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(0, "acceptance/mixture");
    let data: Vec<f32> = (0..100_000).map(|_| ((if rng.bernoulli(0.5) { 2.0 } else { -2.0 }) + 0.5 * rng.normal()) as f32).collect();
    let head = HeadConfig::new(1, 3, 64, 64);
    let sched = NoiseSchedule::from_config(&DiffusionConfig::default()).unwrap();
    let params = fit_density_head(&head, &data, &sched, &DensityFit { steps: 20_000, batch_size: 256, lr: 1e-3, seed: 0 }).unwrap();
    let n = 10_000;
    let z = vec![0.0f32; n * DENSITY_CONTEXT_DIM];
    let x = sample_token(&params, &head, &z, &sched, &mut Rng::new(0, "acceptance/mixture-samples"), 1.0, None).unwrap();
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    // closed form: mean 0, variance 0.5² + 2² = 4.25
    let secs = start.elapsed().as_secs_f64();
    let pass = mean.abs() <= 0.1 && (var / 4.25 - 1.0).abs() <= 0.05 && secs < 600.0;
    outcome(pass, format!("mean {mean:.4} (0 ± 0.1), variance {var:.4} (4.25 ± 5%) ({secs:.0} s)"))
}

fn gclm_coverage() -> Outcome {
    let start = Instant::now();
    let (mut patterns, mut failures) = (0, 0);
    for n in 2..=6 {
        let seq = TokenSequence::new(n, 1, (0..n).map(|v| v as f32).collect()).unwrap();
        for i in 1..n {
            for bits in 0u32..(1 << i) {
                let past: Vec<usize> = (0..i).filter(|&p| bits & (1 << p) != 0).collect();
                for f in i + 1..n {
                    patterns += 1;
                    let plan = MaskPlan::from_visible(gclm_mask(n, i, &past, f).unwrap(), MaskStrategy::Drop);
                    let ok = layout_example(&seq, &plan, Prediction::Skip, &mut Rng::new(0, "fill")).is_some_and(|ex| {
                        ex.content.iter().position(|&c| c == i).is_some_and(|j| ex.content[..j] == past[..] && ex.target[j] == f && ex.loss.contains(&(j + 1, f)))
                    });
                    failures += usize::from(!ok);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(failures == 0 && secs < 60.0, format!("{failures} failures over {patterns} (i, past, f) patterns for n ≤ 6 ({secs:.2} s)"))
}

fn cfg_schedule() -> Outcome {
    let mut ends = true;
    for n in [2, 3, 32, 256] {
        for w0 in [1.0, 3.0, 7.0, 12.5] {
            ends &= cfg_scale(1, n, w0).unwrap() == w0 && cfg_scale(n, n, w0).unwrap() == 1.0;
        }
    }
    // sampler level: identical contexts for both passes and one noise stream
    let sm = mini_state_for_cfg();
    let sched = NoiseSchedule::cosine(1000, 100).unwrap();
    let mut rng = Rng::new(1, "acceptance/cfg-z");
    let z: Vec<f32> = (0..8 * sm.config.hidden).map(|_| rng.normal() as f32).collect();
    let plain = sample_token(&sm.params, &sm.head, &z, &sched, &mut Rng::new(2, "draws"), 1.0, None).unwrap();
    let guided = sample_token(&sm.params, &sm.head, &z, &sched, &mut Rng::new(2, "draws"), 1.0, Some(Guidance { z_uncond: &z, scale: 7.0 })).unwrap();
    let sampler_equal = bits(&plain) == bits(&guided);
    // decoder level: the unguided pass uses the fake prefix, so fake-conditioned lanes see z_u = z_c
    let conds = [Condition::Fake; 4];
    let rng = Rng::new(3, "acceptance/cfg-decode");
    let a = decode(&sm, &conds, &DecodingPolicy::causal(16), &sched, &rng).unwrap();
    let b = decode(&sm, &conds, &DecodingPolicy::causal(16).with_cfg(7.0), &sched, &rng).unwrap();
    let decode_equal = a.sequences.iter().zip(&b.sequences).all(|(x, y)| bits(&x.tokens) == bits(&y.tokens));
    outcome(ends && sampler_equal && decode_equal, format!("ω_1 = ω₀ and ω_n = 1 exactly: {ends}; guided ≡ unguided bitwise: sampler {sampler_equal}, decoder {decode_equal}"))
}

fn mini_state_for_cfg() -> ModelState<f32> {
    let mut s = ModelState::<f32>::init(ModelConfig::preset("mini", 4, 3, 16).unwrap(), HeadConfig::new(4, 3, 64, 64), 4).unwrap();
    // nonzero head output so guidance would show if it leaked
    let mut rng = Rng::new(4, "acceptance/cfg-perturb");
    for i in 0..s.params.len() {
        if s.params.names()[i].starts_with("head.") {
            for v in s.params.tensor_mut(i).data_mut() {
                *v += 0.05 * rng.normal() as f32;
            }
        }
    }
    s
}

fn frechet() -> Outcome {
    let mut rng = Rng::new(0, "acceptance/fd");
    let d = 8;
    let eye: Vec<f64> = (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect();
    let mu = rng.normal_vec(d);
    let shift = frechet_distance(&GaussianStats::new(vec![0.0; d], eye.clone(), 2).unwrap(), &GaussianStats::new(mu.clone(), eye, 2).unwrap()).unwrap();
    let shift_err = (shift - mu.iter().map(|m| m * m).sum::<f64>()).abs();
    let rows = rng.normal_vec(500 * d);
    let x = GaussianStats::from_rows(d, &rows).unwrap();
    let self_fd = frechet_distance(&x, &x).unwrap().abs();
    let mut oracle_err = 0.0f64;
    for _ in 0..20 {
        let (m1, m2) = (rng.normal_vec(d), rng.normal_vec(d));
        let (c1, c2) = (random_spd(d, &mut rng), random_spd(d, &mut rng));
        let fd = frechet_distance(&GaussianStats::new(m1.clone(), c1.clone(), 2).unwrap(), &GaussianStats::new(m2.clone(), c2.clone(), 2).unwrap()).unwrap();
        oracle_err = oracle_err.max((fd - fd_oracle(&m1, &c1, &m2, &c2)).abs());
    }
    let pass = shift_err < 1e-6 && self_fd < 1e-8 && oracle_err < 1e-6;
    outcome(pass, format!("|FD − ‖μ‖²| = {shift_err:.1e}, FD(X,X) = {self_fd:.1e}, max |FD − Jacobi oracle| at dim 8 = {oracle_err:.1e}"))
}

fn masking_schedules() -> Outcome {
    let mix_a = truncated_normal_cdf(0.95, 0.15, 0.0, 1.0);
    let mix_b = truncated_normal_cdf(0.55, 0.25, 0.0, 1.0);
    let cases: Vec<(&str, Box<dyn Fn(f64) -> f64>)> = vec![
        ("mixture-default", Box::new(move |x| 0.5 * mix_a(x) + 0.5 * mix_b(x))),
        ("mar-range", Box::new(truncated_normal_cdf(1.0, 0.25, 0.7, 1.0))),
        ("mar-shifted", Box::new(truncated_normal_cdf(0.85, 0.25, 0.55, 0.85))),
        ("uniform", Box::new(|x: f64| x.clamp(0.0, 1.0))),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, cdf) in cases {
        let s = MaskSchedule::preset(name).unwrap();
        let mut rng = Rng::new(1, name);
        let mut draws: Vec<f64> = (0..100_000).map(|_| sample_ratio(&s, &mut rng)).collect();
        if name == "mar-range" {
            let inside = draws.iter().all(|r| (0.7..=1.0).contains(r));
            pass &= inside;
            parts.push(format!("mar-range in [0.7, 1]: {inside}"));
        }
        let ks = ks_statistic(&mut draws, cdf);
        pass &= ks < 0.02;
        parts.push(format!("{name} KS {ks:.4}"));
    }
    // a point mass has no continuous CDF to test against
    let s = MaskSchedule::preset("fixed-0.7").unwrap();
    let mut rng = Rng::new(1, "fixed-0.7");
    let constant = (0..100_000).all(|_| sample_ratio(&s, &mut rng) == 0.7);
    pass &= constant;
    parts.push(format!("fixed-0.7 always 0.7: {constant}"));
    outcome(pass, parts.join(", "))
}

const BENCH_LEN: usize = 32;
const STEPS: u64 = 20_000;
const SEEDS: [u64; 3] = [0, 1, 2];

fn bench_config(base: TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { batch_size: 16, steps: STEPS, seed, ..base }
}

fn bench_head() -> HeadConfig {
    HeadConfig::new(4, 3, 64, 64)
}

fn train_bench(bench: &Benchmark, base: TrainConfig, seed: u64, label: &str) -> (ModelState<f32>, f64) {
    let start = Instant::now();
    let model = ModelConfig::preset("mini", 4, 3, BENCH_LEN).unwrap();
    let mut state = TrainState::new(model, bench_head(), bench_config(base, seed), DiffusionConfig::default()).unwrap();
    let mut window = 0.0;
    train(&mut state, &bench.train, STEPS, |s, r| {
        window += r.loss;
        if s.step % 5000 == 0 {
            eprintln!("  {label} seed {seed}: step {} mean loss {:.4} ({:.0} s)", s.step, window / 5000.0, start.elapsed().as_secs_f64());
            window = 0.0;
        }
        Ok(())
    })
    .unwrap();
    (state.model, start.elapsed().as_secs_f64())
}

struct SampleStats {
    fd: f64,
    ar_err: f64,
    moment_err: (f64, f64),
    finite: bool,
}

fn sample_stats(state: &ModelState<f32>, bench: &Benchmark, policy: &DecodingPolicy, seed: u64) -> SampleStats {
    let sched = NoiseSchedule::from_config(&DiffusionConfig::default()).unwrap();
    let conds: Vec<Condition> = bench.heldout.iter().map(Condition::of).collect();
    let out = decode(state, &conds, policy, &sched, &Rng::new(seed, "acceptance/decode")).unwrap();
    let finite = out.sequences.iter().all(|s| s.tokens.iter().all(|v| v.is_finite()));
    let fd = frechet_distance(&GaussianStats::from_sequences(&bench.heldout).unwrap(), &GaussianStats::from_sequences(&out.sequences).unwrap()).unwrap();
    let ar_err = fit_ar_transition(&out.sequences).map_or(f64::NAN, |f| frobenius_distance(&f.transition, &bench.process.transition));
    let m = stationary_moment_error(&out.sequences, &bench.process, BENCH_LEN / 4).unwrap();
    SampleStats { fd, ar_err, moment_err: (m.mean, m.cov), finite }
}

/// Per-seed results kept for the decoding-mode comparison.
struct Directional {
    mntp_causal_fd: Vec<f64>,
}

fn directional(bench: &Benchmark) -> (Outcome, Directional) {
    let sched = NoiseSchedule::from_config(&DiffusionConfig::default()).unwrap();
    let mut loss = [Vec::new(), Vec::new()];
    let mut fd = [Vec::new(), Vec::new()];
    let mut secs = [0.0, 0.0];
    for (k, (label, base)) in [("ntp", TrainConfig::ntp()), ("mntp", TrainConfig::mntp())].into_iter().enumerate() {
        for seed in SEEDS {
            let (model, t) = train_bench(bench, base.clone(), seed, label);
            secs[k] += t;
            let l = heldout_diffusion_loss(&model, &bench.heldout, &sched, 1000 + seed, 16).unwrap();
            let s = sample_stats(&model, bench, &DecodingPolicy::causal(BENCH_LEN), seed);
            println!(
                "      {label} seed {seed}: held-out loss {l:.4}, latentFD {:.4}, AR coefficient error {:.3} (target ≤ 0.1), moment errors mean {:.3} cov {:.3}",
                s.fd, s.ar_err, s.moment_err.0, s.moment_err.1
            );
            loss[k].push(l);
            fd[k].push(s.fd);
        }
    }
    let (ln, lm) = (median(&loss[0]), median(&loss[1]));
    let (fn_, fm) = (median(&fd[0]), median(&fd[1]));
    let pass = lm <= 1.02 * ln && fm <= fn_ && secs[0] < 7200.0 && secs[1] < 7200.0;
    let detail = format!(
        "median held-out loss MNTP {lm:.4} vs NTP {ln:.4} (ratio {:.4}, need ≤ 1.02); median latentFD MNTP {fm:.4} vs NTP {fn_:.4}; training {:.0} / {:.0} min",
        lm / ln,
        secs[0] / 60.0,
        secs[1] / 60.0
    );
    (outcome(pass, detail), Directional { mntp_causal_fd: fd[1].clone() })
}

fn decoding_modes(bench: &Benchmark, mntp_fd: Option<&[f64]>) -> Outcome {
    let n = BENCH_LEN;
    let mut finite = true;
    let mut l2r = Vec::new();
    let mut lines = Vec::new();
    for seed in SEEDS {
        let (model, _) = train_bench(bench, TrainConfig::mar(), seed, "mar");
        let mut fds = Vec::new();
        for (name, policy) in [
            ("random/8", DecodingPolicy::random(n, 8)),
            ("random/n", DecodingPolicy::random(n, n)),
            ("left-to-right/n", DecodingPolicy { reveal: RevealOrder::LeftToRight, ..DecodingPolicy::random(n, n) }),
        ] {
            let s = sample_stats(&model, bench, &policy, seed);
            finite &= s.finite && s.fd.is_finite();
            fds.push(format!("{name} {:.4}", s.fd));
            if name.starts_with("left") {
                l2r.push(s.fd);
            }
        }
        lines.push(format!("seed {seed}: {}", fds.join(", ")));
    }
    for l in &lines {
        println!("      mar {l}");
    }
    let m_l2r = median(&l2r);
    match mntp_fd {
        Some(m) => {
            let m_causal = median(m);
            outcome(finite && m_causal <= m_l2r, format!("all decodes finite: {finite}; median latentFD causal MNTP {m_causal:.4} vs left-to-right MAR {m_l2r:.4} at {n} steps"))
        }
        None => outcome(false, "causal MNTP results unavailable (criterion 9 not run)".into()),
    }
}

fn determinism() -> Outcome {
    let bench = common::gaussian_ar_benchmark(7, BENCH_LEN, 1024, 0);
    let fresh = || {
        let model = ModelConfig::preset("mini", 4, 3, BENCH_LEN).unwrap();
        TrainState::new(model, bench_head(), TrainConfig { steps: 200, ..bench_config(TrainConfig::mntp(), 11) }, DiffusionConfig::default()).unwrap()
    };
    let run = |state: &mut TrainState, until: u64| {
        let mut out = Vec::new();
        train(state, &bench.train, until, |_, r| {
            out.push(r.loss.to_bits());
            Ok(())
        })
        .unwrap();
        out
    };
    let mut a = fresh();
    let la = run(&mut a, 200);
    let lb = run(&mut fresh(), 200);
    let dir = tempfile::tempdir().unwrap();
    let mut c = fresh();
    let mut lc = run(&mut c, 100);
    save_checkpoint(&c, dir.path().join("step-100")).unwrap();
    drop(c);
    let mut resumed = load_checkpoint(dir.path().join("step-100")).unwrap();
    lc.extend(run(&mut resumed, 200));
    let params = |s: &TrainState| s.model.params.iter().flat_map(|(_, t)| bits(t.data())).collect::<Vec<_>>();
    let streams = la == lb;
    let resume = lc == la && params(&resumed) == params(&a);
    outcome(streams && resume && la.len() == 200, format!("identical 200-step loss streams: {streams}; resume at 100 bit-equal at 200 (losses and weights): {resume}"))
}

fn rtf() -> Outcome {
    let model = ModelState::<f32>::init(ModelConfig::preset("mini", 4, 3, 256).unwrap(), bench_head(), 0).unwrap();
    let policy = DecodingPolicy::causal(256);
    let cond = [1.0f32, 0.0, 0.0, 1.0, 0.0, 0.0];
    let c = Condition::Real { rows: &cond, len: 2 };
    let rng = Rng::new(0, "acceptance/rtf");
    let base = measure_rtf(&model, &policy, &NoiseSchedule::cosine(1000, 100).unwrap(), c, 10.0, &rng).unwrap();
    let doubled = measure_rtf(&model, &policy, &NoiseSchedule::cosine(1000, 200).unwrap(), c, 10.0, &rng).unwrap();
    let ratio = doubled.rtf / base.rtf;
    outcome((1.6..=2.4).contains(&ratio), format!("RTF {:.4} at 100 steps, {:.4} at 200 steps, ratio {ratio:.3} (need 1.6–2.4); n = 256, 10 s clip", base.rtf, doubled.rtf))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("MNTP_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut run = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let o = f();
        println!("{} {id:>2} {name}: {} [{:.1} s]", if o.pass { "PASS" } else { "FAIL" }, o.detail, start.elapsed().as_secs_f64());
        results.push((id, name, o));
    };

    run(1, "gradient integrity", &mut gradient_integrity);
    run(2, "codec identity", &mut codec_identity);
    run(3, "noise schedule", &mut noise_schedule);
    run(4, "diffusion head as density model", &mut density_model);
    run(5, "generalized causal coverage", &mut gclm_coverage);
    run(6, "guidance schedule", &mut cfg_schedule);
    run(7, "Fréchet distance", &mut frechet);
    run(8, "masking schedules", &mut masking_schedules);
    let bench = common::gaussian_ar_benchmark(0, BENCH_LEN, 8192, 300);
    let mut dir = None;
    run(9, "directional MNTP vs NTP", &mut || {
        let (o, d) = directional(&bench);
        dir = Some(d);
        o
    });
    run(10, "decoding modes", &mut || decoding_modes(&bench, dir.as_ref().map(|d| d.mntp_causal_fd.as_slice())));
    run(11, "determinism and persistence", &mut determinism);
    run(12, "real-time factor scaling", &mut rtf);

    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("{passed}/{} criteria passed", results.len());
    let strict = std::env::var("MNTP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < results.len() {
        std::process::exit(1);
    }
}
