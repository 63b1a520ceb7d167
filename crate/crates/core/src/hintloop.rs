//! Hint candidates: generation, scoring, selection and the hinter update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{compose_hinted_input, Question, RolloutGroup, Trajectory};
use crate::env::{check_hint_validity, HintValidity, InvalidReason, TaskFamilyConfig};
use crate::error::{HillError, Result};
use crate::grpo::{group_advantages, nondegenerate_prob, sequence_group_grad, AdvantageConfig};
use crate::policy::{GradientVector, SoftmaxPolicy};
use crate::reliance::hint_reliance;
use crate::vocab::Token;

/// What the hinter conditions on: the question, one failed rollout and the
/// reference solution.
#[derive(Debug, Clone)]
pub struct HinterContext {
    pub question: Question,
    pub failed_rollout: Trajectory,
}

impl HinterContext {
    pub fn new(question: Question, failed_rollout: Trajectory) -> HinterContext {
        assert_eq!(failed_rollout.reward(), 0, "the conditioning rollout must have failed");
        HinterContext {
            question,
            failed_rollout,
        }
    }

    /// Draws the failed rollout uniformly from an all-incorrect group.
    pub fn from_failed_group<R: Rng>(question: &Question, group: &RolloutGroup, rng: &mut R) -> HinterContext {
        let k = rng.gen_range(0..group.size());
        HinterContext::new(question.clone(), group.trajectories[k].clone())
    }

    pub fn reference_solution(&self) -> &[Token] {
        &self.question.reference_solution
    }

    /// `prompt SEP failed SEP reference`.
    pub fn input(&self, sep: Token) -> Vec<Token> {
        let q = &self.question;
        let mut v = Vec::with_capacity(q.prompt.len() + self.failed_rollout.len() + q.reference_solution.len() + 2);
        v.extend_from_slice(&q.prompt);
        v.push(sep);
        v.extend_from_slice(&self.failed_rollout.tokens);
        v.push(sep);
        v.extend_from_slice(&q.reference_solution);
        v
    }
}

/// One sampled hint. `sample` is the raw hinter output (possibly ending in
/// EOS) and is what the hinter update scores; `hint` is `sample` cut at EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HintSample {
    pub sample: Vec<Token>,
    pub hint: Vec<Token>,
}

pub fn generate_candidates<R: Rng>(
    hinter: &SoftmaxPolicy,
    ctx: &HinterContext,
    m: usize,
    rng: &mut R,
) -> Vec<HintSample> {
    assert!(m >= 2, "need at least two candidates");
    let vocab = hinter.layout().vocab;
    let enc = hinter.encode(&ctx.input(vocab.sep()));
    (0..m)
        .map(|_| {
            let sample = hinter.sample_encoded(&enc, rng);
            let cut = sample.iter().position(|&t| t == vocab.eos()).unwrap_or(sample.len());
            HintSample {
                hint: sample[..cut].to_vec(),
                sample,
            }
        })
        .collect()
}

/// Reward parameters for hint candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HintScoring {
    pub g: usize,
    pub temperature: f64,
    pub r_fail: f64,
    /// Off for the ablation that scores hints by signal creation alone.
    pub transfer_weight: bool,
}

impl HintScoring {
    pub fn validate(&self) -> Result<()> {
        if self.g < 2 {
            return Err(HillError::Config("G must be >= 2".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(HillError::Config("T must be > 0".into()));
        }
        if !(self.r_fail < 0.0) {
            return Err(HillError::Config("R_fail must be < 0".into()));
        }
        Ok(())
    }

    pub fn reward(&self, p_hat_h: f64, rho_hat_c: Option<f64>, validity: HintValidity) -> Result<f64> {
        if !validity.is_valid() {
            return Ok(self.r_fail);
        }
        if p_hat_h <= 0.0 || p_hat_h >= 1.0 {
            return Ok(0.0);
        }
        let creation = nondegenerate_prob(p_hat_h, self.g);
        if !self.transfer_weight {
            return Ok(creation);
        }
        let rho = rho_hat_c.ok_or(HillError::MissingReliance)?;
        Ok(creation * transfer_weight(rho, self.temperature))
    }
}

/// `exp(-max(rho, 0) / T)`.
pub fn transfer_weight(rho_hat_c: f64, temperature: f64) -> f64 {
    (-rho_hat_c.max(0.0) / temperature).exp()
}

/// Transfer-weighted hint reward.
pub fn hint_reward(
    p_hat_h: f64,
    rho_hat_c: Option<f64>,
    validity: HintValidity,
    g: usize,
    temperature: f64,
    r_fail: f64,
) -> Result<f64> {
    HintScoring {
        g,
        temperature,
        r_fail,
        transfer_weight: true,
    }
    .reward(p_hat_h, rho_hat_c, validity)
}

#[derive(Debug, Clone)]
pub struct HintCandidate {
    pub sample: HintSample,
    pub validity: HintValidity,
    /// Absent for invalid hints.
    pub hinted_group: Option<RolloutGroup>,
    pub p_hat_h: Option<f64>,
    /// Present only for valid mixed-outcome candidates.
    pub rho_hat_c: Option<f64>,
    pub reward: f64,
}

impl HintCandidate {
    pub fn hint(&self) -> &[Token] {
        &self.sample.hint
    }
}

/// Validates a hint, rolls the reasoner out `G` times under the hinted input
/// and scores it. Reliance is computed only for mixed-outcome groups, from
/// that group's own correct trajectories.
#[allow(clippy::too_many_arguments)]
pub fn score_candidate<R: Rng>(
    reasoner: &SoftmaxPolicy,
    task: &TaskFamilyConfig,
    question: &Question,
    sample: HintSample,
    scoring: &HintScoring,
    adv: &AdvantageConfig,
    rng: &mut R,
) -> Result<HintCandidate> {
    let vocab = task.vocab;
    let validity = check_hint_validity(task, question, &sample.hint, task.max_context);
    if !validity.is_valid() {
        return Ok(HintCandidate {
            sample,
            validity,
            hinted_group: None,
            p_hat_h: None,
            rho_hat_c: None,
            reward: scoring.r_fail,
        });
    }
    let input = compose_hinted_input(&vocab, question, &sample.hint, task.max_context, task.hint_separator)?;
    let enc = reasoner.encode(&input.composed);
    let trajectories: Vec<Trajectory> = (0..scoring.g)
        .map(|_| Trajectory::scored(&vocab, question, reasoner.sample_encoded(&enc, rng)))
        .collect();
    let mut group = RolloutGroup::new(input.composed, Some(sample.hint.clone()), trajectories, adv);
    let p_hat = group.success_rate;
    let mut rho = None;
    if group.n_correct() > 0 && group.n_correct() < group.size() {
        let mut total = 0.0;
        let mut n = 0usize;
        for t in group.trajectories.iter_mut().filter(|t| t.is_correct()) {
            let lh = reasoner.logprob(&group.input, &t.tokens);
            let lp = reasoner.logprob(&question.prompt, &t.tokens);
            t.logprob_hinted = Some(lh);
            t.logprob_plain = Some(lp);
            total += (lh - lp) / t.len() as f64;
            n += 1;
        }
        rho = Some(total / n as f64);
    }
    let reward = scoring.reward(p_hat, rho, validity)?;
    Ok(HintCandidate {
        sample,
        validity,
        hinted_group: Some(group),
        p_hat_h: Some(p_hat),
        rho_hat_c: rho,
        reward,
    })
}

/// Index of the best candidate, ties to the lowest index. `None` when no
/// candidate has a positive reward.
pub fn select_best(candidates: &[HintCandidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, c) in candidates.iter().enumerate() {
        if best.is_none_or(|b| c.reward > candidates[b].reward) {
            best = Some(j);
        }
    }
    best.filter(|&b| candidates[b].reward > 0.0)
}

/// Installs the best hinted group when its reward is positive, otherwise
/// keeps `original`. The returned group's `input` is the input its
/// trajectories were sampled under.
pub fn select_and_replace(candidates: &[HintCandidate], original: RolloutGroup) -> (RolloutGroup, Option<usize>) {
    match select_best(candidates) {
        Some(j) => {
            let group = candidates[j]
                .hinted_group
                .clone()
                .expect("a positive reward implies a hinted group");
            (group, Some(j))
        }
        None => (original, None),
    }
}

/// Hinter policy-gradient: the candidates form one group over their rewards.
pub fn hinter_grad(
    hinter: &SoftmaxPolicy,
    ctx: &HinterContext,
    candidates: &[HintCandidate],
    cfg: &AdvantageConfig,
) -> GradientVector {
    let rewards: Vec<f64> = candidates.iter().map(|c| c.reward).collect();
    let adv = group_advantages(&rewards, cfg);
    let input = ctx.input(hinter.layout().vocab.sep());
    let seqs: Vec<&[Token]> = candidates.iter().map(|c| c.sample.sample.as_slice()).collect();
    sequence_group_grad(hinter, &input, &seqs, &adv, cfg, None)
}

/// One line of the hint audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintAuditRecord {
    pub step: usize,
    pub question_id: u64,
    pub difficulty: usize,
    pub candidate: usize,
    pub hint: Vec<Token>,
    pub invalid_reason: Option<InvalidReason>,
    pub p_hat_h: Option<f64>,
    pub rho_hat_c: Option<f64>,
    pub reward: f64,
    pub selected: bool,
}

pub fn audit_records(step: usize, question: &Question, candidates: &[HintCandidate], selected: Option<usize>) -> Vec<HintAuditRecord> {
    candidates
        .iter()
        .enumerate()
        .map(|(j, c)| HintAuditRecord {
            step,
            question_id: question.id,
            difficulty: question.difficulty,
            candidate: j,
            hint: c.sample.hint.clone(),
            invalid_reason: c.validity.reason(),
            p_hat_h: c.p_hat_h,
            rho_hat_c: c.rho_hat_c,
            reward: c.reward,
            selected: selected == Some(j),
        })
        .collect()
}

/// Sanity helper for tests and diagnostics: the sampled reliance of one
/// candidate recomputed from scratch.
pub fn recompute_rho_hat(reasoner: &SoftmaxPolicy, question: &Question, candidate: &HintCandidate) -> Option<f64> {
    let group = candidate.hinted_group.as_ref()?;
    let correct: Vec<&Trajectory> = group.correct().collect();
    if correct.is_empty() || correct.len() == group.size() {
        return None;
    }
    let sum: f64 = correct
        .iter()
        .map(|t| hint_reliance(reasoner, &question.prompt, &group.input, &t.tokens) / t.len() as f64)
        .sum();
    Some(sum / correct.len() as f64)
}
