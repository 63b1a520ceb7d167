//! Hint reliance and the exact decomposition
//! `rho_c = log(p_h / p) + KL(P_h(.|r=1) || P(.|r=1))`, which implies
//! `p >= p_h * exp(-rho_c)`.
//!
//! Training only ever uses the sampled, length-normalized estimator; the exact
//! routines enumerate the whole trajectory tree and exist for verification.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{compose_hinted_input, verify, Question};
use crate::env::{check_hint_validity, TaskFamilyConfig};
use crate::error::{HillError, Result};
use crate::policy::{FeatureLayout, SoftmaxPolicy};
use crate::rng::{purpose, stream};
use crate::vocab::Token;

/// `log pi(tau | hinted) - log pi(tau | plain)`, from two teacher-forced passes.
pub fn hint_reliance(policy: &SoftmaxPolicy, plain: &[Token], hinted: &[Token], tau: &[Token]) -> f64 {
    policy.logprob(hinted, tau) - policy.logprob(plain, tau)
}

pub fn avg_reliance_correct(
    policy: &SoftmaxPolicy,
    plain: &[Token],
    hinted: &[Token],
    correct: &[&[Token]],
) -> Result<f64> {
    if correct.is_empty() {
        return Err(HillError::EmptyCorrectSet);
    }
    let total: f64 = correct.iter().map(|t| hint_reliance(policy, plain, hinted, t)).sum();
    Ok(total / correct.len() as f64)
}

/// Mean of `rho(tau) / |tau|` over the multiset of correct trajectories;
/// `|tau|` counts the EOS token.
pub fn length_normalized_reliance(
    policy: &SoftmaxPolicy,
    plain: &[Token],
    hinted: &[Token],
    correct: &[&[Token]],
) -> Result<f64> {
    if correct.is_empty() {
        return Err(HillError::EmptyCorrectSet);
    }
    let total: f64 = correct
        .iter()
        .map(|t| {
            assert!(!t.is_empty(), "trajectory must contain at least one token");
            hint_reliance(policy, plain, hinted, t) / t.len() as f64
        })
        .sum();
    Ok(total / correct.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelianceReport {
    /// Expectation of `rho(tau)` under the hinted correct-conditional.
    pub rho_c: f64,
    /// Expectation of `rho(tau) / |tau|` under the same distribution.
    pub rho_hat_c: f64,
    pub p_h: f64,
    pub p: f64,
    /// `log(p_h / p)`; absent when `p = 0`.
    pub log_ratio: Option<f64>,
    /// KL between the hinted and plain correct-conditionals; absent when `p = 0`.
    pub kl_correct: Option<f64>,
    /// `rho_c - (log_ratio + kl_correct)`; absent when `p = 0`.
    pub identity_residual: Option<f64>,
    pub bound_ok: bool,
    /// Set when the plain success probability is zero.
    pub zero_success: bool,
}

/// Exact reliance decomposition by enumeration.
pub fn exact_decomposition(
    policy: &SoftmaxPolicy,
    question: &Question,
    plain: &[Token],
    hinted: &[Token],
    budget: u128,
) -> Result<RelianceReport> {
    let vocab = policy.layout().vocab;
    let dist_h = policy.enumerate_log_distribution(hinted, budget)?;
    // (len, log P_h, log P) of every correct trajectory
    let mut correct = Vec::new();
    for (seq, lph) in dist_h {
        if verify(&vocab, question, &seq) == 1 {
            correct.push((seq.len(), lph, policy.logprob(plain, &seq)));
        }
    }
    let p_h: f64 = correct.iter().map(|c| c.1.exp()).sum();
    let p: f64 = correct.iter().map(|c| c.2.exp()).sum();
    if p_h <= 0.0 {
        return Err(HillError::EmptyCorrectSet);
    }
    let ln_ph = p_h.ln();
    let mut rho_c = 0.0;
    let mut rho_hat_c = 0.0;
    for &(len, lph, lp) in &correct {
        let w = (lph - ln_ph).exp();
        rho_c += w * (lph - lp);
        rho_hat_c += w * (lph - lp) / len as f64;
    }
    if p <= 0.0 {
        return Ok(RelianceReport {
            rho_c,
            rho_hat_c,
            p_h,
            p,
            log_ratio: None,
            kl_correct: None,
            identity_residual: None,
            bound_ok: true,
            zero_success: true,
        });
    }
    let ln_p = p.ln();
    let kl: f64 = correct
        .iter()
        .map(|&(_, lph, lp)| {
            let log_wh = lph - ln_ph;
            let log_w = lp - ln_p;
            log_wh.exp() * (log_wh - log_w)
        })
        .sum();
    let log_ratio = ln_ph - ln_p;
    Ok(RelianceReport {
        rho_c,
        rho_hat_c,
        p_h,
        p,
        log_ratio: Some(log_ratio),
        kl_correct: Some(kl),
        identity_residual: Some(rho_c - (log_ratio + kl)),
        bound_ok: p >= p_h * (-rho_c).exp() - 1e-12,
        zero_success: false,
    })
}

/// Sampled estimates of `p_h` and of the length-normalized reliance, with
/// their standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub n: usize,
    pub n_correct: usize,
    pub p_hat_h: f64,
    pub p_hat_h_se: f64,
    pub rho_hat_c: Option<f64>,
    pub rho_hat_c_se: Option<f64>,
}

pub fn monte_carlo_estimate<R: Rng>(
    policy: &SoftmaxPolicy,
    question: &Question,
    plain: &[Token],
    hinted: &[Token],
    n: usize,
    rng: &mut R,
) -> MonteCarloEstimate {
    let vocab = policy.layout().vocab;
    let enc_h = policy.encode(hinted);
    let enc_p = policy.encode(plain);
    let mut rel = Vec::new();
    for _ in 0..n {
        let tau = policy.sample_encoded(&enc_h, rng);
        if verify(&vocab, question, &tau) == 1 {
            let r = policy.logprob_encoded(&enc_h, &tau) - policy.logprob_encoded(&enc_p, &tau);
            rel.push(r / tau.len() as f64);
        }
    }
    let k = rel.len();
    let p_hat = k as f64 / n as f64;
    let (rho, rho_se) = if k >= 2 {
        let mean = rel.iter().sum::<f64>() / k as f64;
        let var = rel.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1) as f64;
        (Some(mean), Some((var / k as f64).sqrt()))
    } else {
        (rel.first().copied(), None)
    };
    MonteCarloEstimate {
        n,
        n_correct: k,
        p_hat_h: p_hat,
        p_hat_h_se: (p_hat * (1.0 - p_hat) / n as f64).sqrt(),
        rho_hat_c: rho,
        rho_hat_c_se: rho_se,
    }
}

/// Result of checking the decomposition on many random triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySweep {
    pub cases: usize,
    pub max_residual: f64,
    pub bound_violations: usize,
    pub zero_success: usize,
    pub reports: Vec<RelianceReport>,
}

fn random_valid_hint<R: Rng>(task: &TaskFamilyConfig, question: &Question, rng: &mut R) -> Vec<Token> {
    let v = task.vocab;
    loop {
        let mut hint = Vec::new();
        let n_elements = rng.gen_range(1..=task.max_hint_len);
        for _ in 0..n_elements {
            let e = rng.gen_range(0..v.n_hint_elements());
            if e < v.n_strategy {
                hint.push(v.strategy(e));
            } else {
                hint.push(v.reveal());
                hint.push(v.residue(e - v.n_strategy));
            }
        }
        if check_hint_validity(task, question, &hint, task.max_context).is_valid() {
            return hint;
        }
    }
}

/// Draws `cases` random (policy, question, hint) triples and runs
/// [`exact_decomposition`] on each. Policies are reasoner layouts with
/// uniform parameters in `[-scale, scale]`.
pub fn identity_sweep(
    task: &TaskFamilyConfig,
    buckets: usize,
    max_len: usize,
    scale: f64,
    cases: usize,
    seed: u64,
    budget: u128,
) -> Result<IdentitySweep> {
    let layout = FeatureLayout::reasoner(task.vocab, buckets, max_len);
    let required = (task.vocab.size() as u128).checked_pow(max_len as u32).unwrap_or(u128::MAX);
    if cases > 0 && required > budget {
        return Err(HillError::BudgetExceeded { required, budget });
    }
    let reports = (0..cases)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, &[purpose::INIT, i as u64]);
            let policy = SoftmaxPolicy::random(layout.clone(), max_len, scale, &mut rng);
            let d = rng.gen_range(task.d_min..=task.d_max.min(max_len.saturating_sub(1)).max(task.d_min));
            let q = task.generate_question(i as u64, d, &mut rng);
            let hint = random_valid_hint(task, &q, &mut rng);
            let hinted = compose_hinted_input(&task.vocab, &q, &hint, task.max_context, task.hint_separator)?;
            exact_decomposition(&policy, &q, &q.prompt, &hinted.composed, budget)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IdentitySweep {
        cases,
        max_residual: reports
            .iter()
            .filter_map(|r| r.identity_residual)
            .fold(0.0, |a: f64, b| a.max(b.abs())),
        bound_violations: reports.iter().filter(|r| !r.bound_ok).count(),
        zero_success: reports.iter().filter(|r| r.zero_success).count(),
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{FeatureLayout, Template, DEFAULT_ENUMERATION_BUDGET};
    use crate::vocab::Vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::default()
    }

    /// Single hash bucket and chain rows only: the state cannot see the hint.
    fn hint_invariant(rng: &mut ChaCha8Rng) -> SoftmaxPolicy {
        let layout = FeatureLayout::new(vocab(), 8, vec![Template::InputHash { buckets: 1 }, Template::Chain]);
        SoftmaxPolicy::random(layout, 3, 1.5, rng)
    }

    fn question() -> Question {
        Question::from_chain(&vocab(), 0, 1, &[2, 2])
    }

    fn inputs(q: &Question) -> (Vec<Token>, Vec<Token>) {
        let mut hinted = q.prompt.clone();
        hinted.push(vocab().strategy(1));
        (q.prompt.clone(), hinted)
    }

    #[test]
    fn hint_invariant_policy_has_zero_reliance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = hint_invariant(&mut rng);
        let q = question();
        let (plain, hinted) = inputs(&q);
        for _ in 0..50 {
            let tau = p.sample(&hinted, &mut rng);
            assert_eq!(hint_reliance(&p, &plain, &hinted, &tau), 0.0);
        }
        let r = exact_decomposition(&p, &q, &plain, &hinted, DEFAULT_ENUMERATION_BUDGET).unwrap();
        assert_eq!(r.rho_c, 0.0);
        assert_eq!(r.p_h, r.p);
        assert!(r.kl_correct.unwrap().abs() < 1e-15);
        assert!(r.identity_residual.unwrap().abs() < 1e-15);
    }

    #[test]
    fn reliance_is_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = SoftmaxPolicy::random(FeatureLayout::reasoner(vocab(), 8, 4), 3, 1.0, &mut rng);
        let q = question();
        let (plain, hinted) = inputs(&q);
        let tau = q.reference_solution.clone();
        let a = hint_reliance(&p, &plain, &hinted, &tau);
        let b = hint_reliance(&p, &hinted, &plain, &tau);
        assert_eq!(a, -b);
    }

    #[test]
    fn hint_keyed_boost_gives_large_positive_reliance() {
        let v = vocab();
        let layout = FeatureLayout::reasoner(v, 8, 8);
        let mut p = SoftmaxPolicy::zeros(layout.clone(), 3);
        let q = question(); // 1 +2 +2 -> 3, 0
        let (plain, hinted) = inputs(&q);
        // +5 on the correct token of every step, but only in rows keyed by STRAT_1
        let n = v.size();
        let steps = [(1, 2, 0, 3usize), (3, 2, 1, 0), (0, v.modulus, 2, v.eos().index())];
        for &(carry, operand, pos, tok) in &steps {
            let row = layout.hint_row(1, carry, operand, pos).unwrap();
            p.params_mut()[row * n + tok] = 5.0;
        }
        let rho = hint_reliance(&p, &plain, &hinted, &q.reference_solution);
        // each step: log softmax with +5 vs uniform over n
        let per_step = 5.0 - ((n as f64 - 1.0) + 5f64.exp()).ln() + (n as f64).ln();
        assert!((rho - 3.0 * per_step).abs() < 1e-12);
        assert!(rho > 5.0);
    }

    #[test]
    fn averages_and_length_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = SoftmaxPolicy::random(FeatureLayout::reasoner(vocab(), 8, 4), 4, 1.0, &mut rng);
        let q = question();
        let (plain, hinted) = inputs(&q);
        let eos = vocab().eos();
        let t1 = vec![Token(3), Token(0), eos];
        let t2 = vec![Token(4), Token(0), eos];
        let r1 = hint_reliance(&p, &plain, &hinted, &t1);
        let r2 = hint_reliance(&p, &plain, &hinted, &t2);
        let single = avg_reliance_correct(&p, &plain, &hinted, &[&t1]).unwrap();
        assert_eq!(single, r1);
        let pair = avg_reliance_correct(&p, &plain, &hinted, &[&t1, &t2]).unwrap();
        assert!((pair - (r1 + r2) / 2.0).abs() < 1e-15);
        let normed = length_normalized_reliance(&p, &plain, &hinted, &[&t1, &t2]).unwrap();
        assert!((normed - pair / 3.0).abs() < 1e-12);
        assert!(matches!(
            avg_reliance_correct(&p, &plain, &hinted, &[]),
            Err(HillError::EmptyCorrectSet)
        ));
        assert!(matches!(
            length_normalized_reliance(&p, &plain, &hinted, &[]),
            Err(HillError::EmptyCorrectSet)
        ));
    }

    #[test]
    fn exact_rho_c_matches_weighted_mean_over_enumerated_correct() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = SoftmaxPolicy::random(FeatureLayout::reasoner(vocab(), 8, 4), 3, 1.0, &mut rng);
        let q = question();
        let (plain, hinted) = inputs(&q);
        let r = exact_decomposition(&p, &q, &plain, &hinted, DEFAULT_ENUMERATION_BUDGET).unwrap();
        // independent route: explicit probabilities, then a weighted mean of reliances
        let dist = p.enumerate_distribution(&hinted, DEFAULT_ENUMERATION_BUDGET).unwrap();
        let correct: Vec<_> = dist
            .iter()
            .filter(|(s, _)| verify(&vocab(), &q, s) == 1)
            .collect();
        let mass: f64 = correct.iter().map(|(_, w)| w).sum();
        let mean: f64 = correct
            .iter()
            .map(|(s, w)| w / mass * hint_reliance(&p, &plain, &hinted, s))
            .sum();
        assert!((mean - r.rho_c).abs() < 1e-10);
        assert!(r.bound_ok);
        assert!(r.kl_correct.unwrap() >= 0.0);
    }
}
