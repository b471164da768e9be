//! Masking-ratio schedules, mask plans and next-kept target derivation.
//!
//! Positions are 0-based throughout; the sentinel target of the last kept
//! position is `n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Distribution over masking ratios in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaskSchedule {
    /// Normal restricted to `[0, 1]` by rejection.
    Normal { mean: f64, std: f64 },
    /// Normal restricted to `[lo, hi]` by rejection.
    TruncatedNormal { mean: f64, std: f64, lo: f64, hi: f64 },
    Fixed { ratio: f64 },
    /// Uniform over `[0, 1]`.
    Uniform,
    /// Pick a component by weight, then draw from it.
    Mixture { weights: Vec<f64>, components: Vec<MaskSchedule> },
}

pub const PRESETS: [&str; 5] = ["mixture-default", "mar-range", "mar-shifted", "fixed-0.7", "uniform"];

impl MaskSchedule {
    /// Named presets. `mixture-default` averages a high-ratio normal and a
    /// long-tailed truncated normal; `mar-range` is MAR's truncated normal on
    /// `[0.7, 1]` and `mar-shifted` the same shape moved to `[0.55, 0.85]`.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "mixture-default" => MaskSchedule::Mixture {
                weights: vec![0.5, 0.5],
                components: vec![
                    MaskSchedule::Normal { mean: 0.95, std: 0.15 },
                    MaskSchedule::TruncatedNormal { mean: 0.55, std: 0.25, lo: 0.0, hi: 1.0 },
                ],
            },
            "mar-range" => MaskSchedule::TruncatedNormal { mean: 1.0, std: 0.25, lo: 0.7, hi: 1.0 },
            "mar-shifted" => MaskSchedule::TruncatedNormal { mean: 0.85, std: 0.25, lo: 0.55, hi: 0.85 },
            "fixed-0.7" => MaskSchedule::Fixed { ratio: 0.7 },
            "uniform" => MaskSchedule::Uniform,
            "none" => MaskSchedule::Fixed { ratio: 0.0 },
            other => return Err(Error::Argument(format!("unknown schedule preset {other:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(m.to_string()));
        match self {
            MaskSchedule::Normal { std, mean } => {
                if !(*std > 0.0) || !mean.is_finite() {
                    return bad("normal schedule needs std > 0");
                }
            }
            MaskSchedule::TruncatedNormal { mean, std, lo, hi } => {
                if !(*std > 0.0) || !mean.is_finite() || !(0.0 <= *lo && lo < hi && *hi <= 1.0) {
                    return bad("truncated normal needs std > 0 and 0 ≤ lo < hi ≤ 1");
                }
            }
            MaskSchedule::Fixed { ratio } => {
                if !(0.0..=1.0).contains(ratio) {
                    return bad("fixed ratio must lie in [0, 1]");
                }
            }
            MaskSchedule::Uniform => {}
            MaskSchedule::Mixture { weights, components } => {
                if weights.len() != components.len() || weights.is_empty() {
                    return bad("mixture needs one weight per component");
                }
                if weights.iter().any(|w| *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad("mixture weights must be nonnegative and sum to 1");
                }
                for c in components {
                    c.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Support of the schedule.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            MaskSchedule::Normal { .. } | MaskSchedule::Uniform => (0.0, 1.0),
            MaskSchedule::TruncatedNormal { lo, hi, .. } => (*lo, *hi),
            MaskSchedule::Fixed { ratio } => (*ratio, *ratio),
            MaskSchedule::Mixture { components, .. } => components
                .iter()
                .map(MaskSchedule::bounds)
                .fold((1.0, 0.0), |(l, h), (a, b)| (f64::min(l, a), f64::max(h, b))),
        }
    }
}

fn rejection_normal(mean: f64, std: f64, lo: f64, hi: f64, rng: &mut Rng) -> f64 {
    loop {
        let r = mean + std * rng.normal();
        if (lo..=hi).contains(&r) {
            return r;
        }
    }
}

/// Draw one masking ratio.
pub fn sample_ratio(sched: &MaskSchedule, rng: &mut Rng) -> f64 {
    match sched {
        MaskSchedule::Normal { mean, std } => rejection_normal(*mean, *std, 0.0, 1.0, rng),
        MaskSchedule::TruncatedNormal { mean, std, lo, hi } => rejection_normal(*mean, *std, *lo, *hi, rng),
        MaskSchedule::Fixed { ratio } => *ratio,
        MaskSchedule::Uniform => rng.uniform(),
        MaskSchedule::Mixture { weights, components } => {
            let u = rng.uniform();
            let mut acc = 0.0;
            for (w, c) in weights.iter().zip(components) {
                acc += w;
                if u < acc {
                    return sample_ratio(c, rng);
                }
            }
            sample_ratio(components.last().expect("validated mixture"), rng)
        }
    }
}

/// How masked positions are realized in the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStrategy {
    /// Remove masked tokens, shortening the sequence.
    Drop,
    /// Replace masked tokens with zero vectors.
    Zero,
    /// Replace masked tokens with unit-Gaussian draws.
    Gaussian,
    /// No masking.
    None,
}

/// A sampled mask over `n` positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// `true` = visible.
    pub visible: Vec<bool>,
    /// Ascending visible positions.
    pub kept: Vec<usize>,
    /// For each kept position, the next kept position (or `n`).
    pub targets: Vec<usize>,
    pub strategy: MaskStrategy,
}

impl MaskPlan {
    pub fn from_visible(visible: Vec<bool>, strategy: MaskStrategy) -> Self {
        let kept: Vec<usize> = visible.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i).collect();
        let targets = next_kept_targets(&kept, visible.len());
        Self { visible, kept, targets, strategy }
    }

    pub fn n(&self) -> usize {
        self.visible.len()
    }

    pub fn masked(&self) -> impl Iterator<Item = usize> + '_ {
        self.visible.iter().enumerate().filter(|(_, v)| !**v).map(|(i, _)| i)
    }

    /// Realize the plan on `n × dim` tokens: drop removes masked rows, zero
    /// and gaussian overwrite them in place.
    pub fn apply(&self, tokens: &[f32], dim: usize, rng: &mut Rng) -> Vec<f32> {
        match self.strategy {
            MaskStrategy::None => tokens.to_vec(),
            MaskStrategy::Drop => self.kept.iter().flat_map(|&i| tokens[i * dim..(i + 1) * dim].iter().copied()).collect(),
            MaskStrategy::Zero | MaskStrategy::Gaussian => {
                let mut out = tokens.to_vec();
                for i in self.masked() {
                    for v in &mut out[i * dim..(i + 1) * dim] {
                        *v = if self.strategy == MaskStrategy::Zero { 0.0 } else { rng.normal() as f32 };
                    }
                }
                out
            }
        }
    }
}

/// Next kept index for every kept position; the last one points at `n`.
pub fn next_kept_targets(kept: &[usize], n: usize) -> Vec<usize> {
    (0..kept.len()).map(|j| kept.get(j + 1).copied().unwrap_or(n)).collect()
}

/// Number of masked positions: `round(n · ratio)`, ties away from zero.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio.clamp(0.0, 1.0)).round() as usize).min(n)
}

/// Mask a uniformly random subset of `round(n · ratio)` positions
/// (partial Fisher–Yates on the index array).
pub fn sample_plan(n: usize, ratio: f64, strategy: MaskStrategy, rng: &mut Rng) -> MaskPlan {
    let mut visible = vec![true; n];
    if strategy != MaskStrategy::None {
        let m = masked_count(n, ratio);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..m {
            let j = i + rng.below(n - i);
            idx.swap(i, j);
            visible[idx[i]] = false;
        }
    }
    MaskPlan::from_visible(visible, strategy)
}

/// Visibility pattern that makes position `i` (after dropping) condition on
/// exactly `past` and predict `future`.
pub fn gclm_mask(n: usize, i: usize, past: &[usize], future: usize) -> Result<Vec<bool>> {
    if future <= i {
        return Err(Error::Argument(format!("target {future} must come after current index {i}")));
    }
    if future >= n || i == 0 {
        return Err(Error::Argument(format!("need 0 < i < target < n, got i={i}, target={future}, n={n}")));
    }
    if let Some(&p) = past.iter().find(|&&p| p >= i) {
        return Err(Error::Argument(format!("past index {p} is not before {i}")));
    }
    let mut v = vec![false; n];
    v[i] = true;
    v[future] = true;
    for &p in past {
        v[p] = true;
    }
    Ok(v)
}
