//! Group-relative advantages, the non-degenerate probability, and the
//! policy-gradient of the group objective (optionally with asymmetric ratio
//! clipping).

use serde::{Deserialize, Serialize};

use crate::domain::RolloutGroup;
use crate::error::{HillError, Result};
use crate::policy::{GradientVector, SoftmaxPolicy};
use crate::vocab::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdMode {
    /// Divide by `G`.
    Population,
    /// Divide by `G - 1`.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageConfig {
    pub epsilon: f64,
    pub std_mode: StdMode,
    pub clip_enabled: bool,
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        AdvantageConfig {
            epsilon: 1e-8,
            std_mode: StdMode::Population,
            clip_enabled: false,
            eps_low: 0.2,
            eps_high: 0.28,
        }
    }
}

impl AdvantageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(HillError::Config("epsilon must be > 0".into()));
        }
        if self.eps_low < 0.0 || self.eps_high < 0.0 {
            return Err(HillError::Config("clip bounds must be >= 0".into()));
        }
        Ok(())
    }
}

/// `A_i = (r_i - mean) / (std + eps)`. Constant inputs give exact zeros and the
/// left-to-right sum of the output is exactly zero.
pub fn group_advantages(rewards: &[f64], cfg: &AdvantageConfig) -> Vec<f64> {
    let g = rewards.len();
    assert!(g >= 2, "a group needs at least two members");
    let first = rewards[0];
    if rewards.iter().all(|&r| r == first) {
        return vec![0.0; g];
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let ss: f64 = rewards.iter().map(|r| (r - mean) * (r - mean)).sum();
    let denom = match cfg.std_mode {
        StdMode::Population => g as f64,
        StdMode::Sample => (g - 1) as f64,
    };
    let scale = ss.sqrt() / denom.sqrt() + cfg.epsilon;
    let mut adv: Vec<f64> = rewards.iter().map(|r| (r - mean) / scale).collect();
    // last entry absorbs rounding so the sum is exactly zero
    let head: f64 = adv[..g - 1].iter().sum();
    adv[g - 1] = -head;
    adv
}

/// Probability that `G` Bernoulli(`p`) draws are not all equal:
/// `1 - p^G - (1-p)^G`.
pub fn nondegenerate_prob(p: f64, g: usize) -> f64 {
    assert!((0.0..=1.0).contains(&p), "p must lie in [0, 1]");
    let gf = g as f64;
    let s = if p <= 0.5 {
        // 1 - (1-p)^G without cancellation for small p
        -(gf * (-p).ln_1p()).exp_m1() - p.powi(g as i32)
    } else {
        let q = 1.0 - p;
        -(gf * (-q).ln_1p()).exp_m1() - q.powi(g as i32)
    };
    s.max(0.0)
}

pub fn is_all_incorrect(group: &RolloutGroup) -> bool {
    group.trajectories.iter().all(|t| t.reward() == 0)
}

/// Gradient of `-sum_i A_i sum_t log pi(y_it | context, y_i<t)`.
///
/// With clipping enabled each token term becomes the clipped ratio surrogate
/// `min(ratio * A, clip(ratio, 1 - eps_low, 1 + eps_high) * A)` against
/// `snapshot` (the policy that sampled the sequences); `None` means the
/// snapshot is `policy` itself.
pub fn sequence_group_grad(
    policy: &SoftmaxPolicy,
    context: &[Token],
    sequences: &[&[Token]],
    advantages: &[f64],
    cfg: &AdvantageConfig,
    snapshot: Option<&SoftmaxPolicy>,
) -> GradientVector {
    assert_eq!(sequences.len(), advantages.len());
    let mut grad = GradientVector::zeros(policy.n_params());
    for (seq, &a) in sequences.iter().zip(advantages) {
        if a == 0.0 {
            continue;
        }
        if cfg.clip_enabled {
            let now = policy.token_logprobs(context, seq);
            let old = snapshot.unwrap_or(policy).token_logprobs(context, seq);
            let weights: Vec<f64> = now
                .iter()
                .zip(&old)
                .map(|(n, o)| {
                    let ratio = (n - o).exp();
                    let clipped = (a > 0.0 && ratio > 1.0 + cfg.eps_high)
                        || (a < 0.0 && ratio < 1.0 - cfg.eps_low);
                    if clipped {
                        0.0
                    } else {
                        -a * ratio
                    }
                })
                .collect();
            policy.accumulate_logprob_grad(context, seq, |t| weights[t], &mut grad.0);
        } else {
            policy.accumulate_logprob_grad(context, seq, |_| -a, &mut grad.0);
        }
    }
    grad
}

/// Reasoner policy-gradient for one group. `input` must be exactly the input
/// the group was sampled under.
pub fn reasoner_grad(
    policy: &SoftmaxPolicy,
    input: &[Token],
    group: &RolloutGroup,
    cfg: &AdvantageConfig,
    snapshot: Option<&SoftmaxPolicy>,
) -> Result<GradientVector> {
    if input != group.input.as_slice() {
        return Err(HillError::InputMismatch);
    }
    let seqs: Vec<&[Token]> = group.trajectories.iter().map(|t| t.tokens.as_slice()).collect();
    Ok(sequence_group_grad(policy, input, &seqs, &group.advantages, cfg, snapshot))
}
