use mntp::diffusion::{forward_diffuse, head_loss, init_head, respace, sample_token, Guidance, HeadConfig, NoiseSchedule};
use mntp::numerics::{grad_check, Rng, Tensor};
use proptest::prelude::*;

#[test]
fn forward_noise_variance_at_zero_input() {
    let sched = NoiseSchedule::cosine(1000, 100).unwrap();
    let mut rng = Rng::new(0, "eps");
    for t in [1, 10, 250, 500, 900, 1000] {
        let n = 10_000;
        let eps = rng.normal_vec(n);
        let xt = forward_diffuse(&vec![0.0; n], t, &eps, &sched).unwrap();
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expect = 1.0 - sched.alpha_bar[t];
        assert!((var / expect - 1.0).abs() < 0.05, "t={t}: {var} vs {expect}");
    }
}

#[test]
fn hundred_step_subset_is_evenly_strided() {
    let sched = NoiseSchedule::cosine(1000, 100).unwrap();
    assert_eq!(sched.inference.len(), 100);
    assert_eq!(sched.inference[0], 1);
    assert!(sched.inference.windows(2).all(|w| w[1] - w[0] == 10));
    assert!(sched.alpha.iter().skip(1).all(|&a| a > 0.0 && a < 1.0));
}

#[test]
fn head_loss_gradient_in_context_matches_finite_differences() {
    let c = HeadConfig::new(3, 2, 16, 8);
    let mut params = init_head::<f64>(&c, 5, 2).unwrap();
    // the output layer starts at zero; randomize everything so z matters
    let mut rng = Rng::new(2, "perturb");
    for i in 0..params.len() {
        let shape = params.tensor(i).shape().to_vec();
        let n = params.tensor(i).len();
        let name = params.names()[i].clone();
        params.replace(&name, Tensor::new(shape, (0..n).map(|_| 0.4 * rng.normal()).collect()).unwrap()).unwrap();
    }
    let sched = NoiseSchedule::cosine(1000, 100).unwrap();
    let x: Vec<f32> = (0..12).map(|_| rng.normal() as f32).collect();
    let z = Tensor::new(vec![4, 5], rng.normal_vec(20)).unwrap();
    let r = grad_check(
        |t, v| {
            let p = params.bind(t);
            head_loss(t, &p, &c, &sched, v[0], &x, 3, &mut Rng::new(7, "t"), &mut Rng::new(7, "noise"))
        },
        &[z],
        1e-3,
        None,
    )
    .unwrap();
    assert_eq!(r.checked, 20);
    assert!(r.max_rel_err < 1e-3, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn respacing_is_strictly_increasing_inside_the_table(t_train in 1usize..3000, steps in 1usize..400) {
        let s = respace(t_train, steps);
        prop_assert_eq!(s.len(), steps.min(t_train));
        prop_assert_eq!(s[0], 1);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*s.last().unwrap() <= t_train);
    }

    /// Guidance against an identical unconditional context changes nothing,
    /// bit for bit, whatever the scale.
    #[test]
    fn guidance_with_equal_contexts_is_unguided(scale in 0.0f64..10.0, seed in any::<u64>()) {
        let c = HeadConfig::new(2, 2, 8, 4);
        let mut params = init_head::<f32>(&c, 3, seed).unwrap();
        let mut rng = Rng::new(seed, "perturb");
        for i in 0..params.len() {
            for v in params.tensor_mut(i).data_mut() {
                *v += 0.3 * rng.normal() as f32;
            }
        }
        let sched = NoiseSchedule::cosine(1000, 20).unwrap();
        let z: Vec<f32> = (0..6).map(|_| rng.normal() as f32).collect();
        let plain = sample_token(&params, &c, &z, &sched, &mut Rng::new(seed, "draws"), 1.0, None).unwrap();
        let guided = sample_token(&params, &c, &z, &sched, &mut Rng::new(seed, "draws"), 1.0, Some(Guidance { z_uncond: &z, scale })).unwrap();
        prop_assert_eq!(plain.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), guided.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
