use mntp::diffusion::HeadConfig;
use mntp::model::{encode_context, AttentionMode, Condition, ModelConfig, ModelState, SlotSpec};
use mntp::numerics::{Rng, Tape, Tensor};
use proptest::prelude::*;

fn small(attention: AttentionMode, target_pos_emb: bool) -> ModelConfig {
    ModelConfig { layers: 2, hidden: 16, heads: 2, max_len: 12, token_dim: 3, cond_dim: 2, prefix_len: 2, attention, target_pos_emb, mlp_ratio: 2 }
}

fn context(state: &ModelState<f64>, tokens: &[f32], content: &[usize], target: &[usize], cond: Condition, mode: AttentionMode) -> Vec<f64> {
    let tape = Tape::no_grad();
    let p = state.params.bind(&tape);
    let spec = SlotSpec { prefix: Some(cond), bos: Some(content.first().copied().unwrap_or(0)), tokens, content, target };
    let enc = encode_context(&tape, &p, &state.config, &[spec], mode).unwrap();
    tape.value(enc.z).data().to_vec()
}

#[test]
fn parameter_counts_of_presets() {
    assert_eq!(ModelConfig::preset("mini", 4, 3, 32).unwrap().param_count(), 802_950);
    assert_eq!(ModelConfig::preset("small", 4, 3, 32).unwrap().param_count(), 6_337_798);
    let m = ModelConfig::preset("mini", 4, 3, 32).unwrap();
    let s = ModelState::<f32>::init(m.clone(), HeadConfig::new(4, 3, 64, 32), 0).unwrap();
    let head_only = ModelState::<f32>::init(ModelConfig { layers: 0, ..m.clone() }, HeadConfig::new(4, 3, 64, 32), 0).unwrap();
    assert_eq!(s.params.scalar_count() - head_only.params.scalar_count(), m.param_count() - ModelConfig { layers: 0, ..m }.param_count());
}

#[test]
fn zeroed_target_table_equals_no_target_table() {
    let head = HeadConfig::new(3, 2, 16, 8);
    let with = ModelState::<f64>::init(small(AttentionMode::Causal, true), head.clone(), 3).unwrap();
    let mut with = with;
    let zeros = Tensor::zeros(with.params.get("pos.target").unwrap().shape());
    with.params.replace("pos.target", zeros).unwrap();
    let without = ModelState::<f64>::init(small(AttentionMode::Causal, false), head, 3).unwrap();
    let mut rng = Rng::new(1, "tokens");
    let tokens: Vec<f32> = (0..18).map(|_| rng.normal() as f32).collect();
    let content: Vec<usize> = (0..6).collect();
    let target: Vec<usize> = (1..7).collect();
    let cond = [1.0f32, 0.0, 0.0, 1.0];
    let c = Condition::Real { rows: &cond, len: 2 };
    let a = context(&with, &tokens, &content, &target, c, AttentionMode::Causal);
    let b = context(&without, &tokens, &content, &target, c, AttentionMode::Causal);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Perturbing input `k` leaves every context at or before slot `k`
    /// bit-identical under causal attention.
    #[test]
    fn causal_contexts_ignore_later_tokens(n in 2usize..9, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let state = ModelState::<f64>::init(small(AttentionMode::Causal, true), HeadConfig::new(3, 2, 16, 8), seed).unwrap();
        let mut rng = Rng::new(seed, "tokens");
        let tokens: Vec<f32> = (0..n * 3).map(|_| rng.normal() as f32).collect();
        let content: Vec<usize> = (0..n).collect();
        let target: Vec<usize> = (1..=n).collect();
        let k = ((n as f64 * k_frac) as usize).min(n - 1);
        let mut bumped = tokens.clone();
        for v in &mut bumped[k * 3..k * 3 + 3] {
            *v += 1.5;
        }
        let a = context(&state, &tokens, &content, &target, Condition::Fake, AttentionMode::Causal);
        let b = context(&state, &bumped, &content, &target, Condition::Fake, AttentionMode::Causal);
        let h = 16;
        // slot 0 is β, slot j ≥ 1 reads input j − 1
        for slot in 0..=n {
            let same = a[slot * h..(slot + 1) * h].iter().zip(&b[slot * h..(slot + 1) * h]).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert_eq!(same, slot <= k, "slot {} with input {} perturbed", slot, k);
        }
    }

    /// Without positional information, bidirectional attention is
    /// permutation-equivariant over the token slots.
    #[test]
    fn bidirectional_contexts_permute_with_tokens(n in 2usize..8, seed in any::<u64>()) {
        let mut state = ModelState::<f64>::init(small(AttentionMode::Bidirectional, false), HeadConfig::new(3, 2, 16, 8), seed).unwrap();
        let zeros = Tensor::zeros(state.params.get("pos.content").unwrap().shape());
        state.params.replace("pos.content", zeros).unwrap();
        let mut rng = Rng::new(seed, "tokens");
        let tokens: Vec<f32> = (0..n * 3).map(|_| rng.normal() as f32).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let permuted: Vec<f32> = perm.iter().flat_map(|&i| tokens[i * 3..i * 3 + 3].iter().copied()).collect();
        let idx: Vec<usize> = (0..n).collect();
        let cond = [0.5f32, -1.0];
        let c = Condition::Real { rows: &cond, len: 1 };
        let a = context(&state, &tokens, &idx, &idx, c, AttentionMode::Bidirectional);
        let b = context(&state, &permuted, &idx, &idx, c, AttentionMode::Bidirectional);
        let h = 16;
        for (j, &i) in perm.iter().enumerate() {
            for d in 0..h {
                let (x, y) = (a[(i + 1) * h + d], b[(j + 1) * h + d]);
                prop_assert!((x - y).abs() < 1e-10, "{} vs {}", x, y);
            }
        }
        for d in 0..h {
            prop_assert!((a[d] - b[d]).abs() < 1e-10);
        }
    }
}
