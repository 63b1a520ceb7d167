//! Log-linear categorical sequence policies.
//!
//! The same type backs both the reasoner and the hinter; only the feature
//! layout and the initial table differ. Logits at a step are the sum of the
//! active rows of the parameter table (see [`features`]), so log-probability
//! gradients are sparse: each visited row receives `onehot(token) - softmax`.

mod checkpoint;
pub mod features;
pub mod init;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use features::{EncodedInput, FeatureLayout, RowSet, Template};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HillError, Result};
use crate::vocab::Token;

pub const DEFAULT_ENUMERATION_BUDGET: u128 = 1_000_000;

/// Dense gradient aligned with [`SoftmaxPolicy::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(n: usize) -> GradientVector {
        GradientVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    pub fn add_scaled(&mut self, other: &GradientVector, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|x| *x *= s);
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub layout: FeatureLayout,
    pub temperature: f64,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    layout: FeatureLayout,
    params: Vec<f64>,
    /// Sampling temperature; scoring always uses the raw logits.
    pub temperature: f64,
    pub max_len: usize,
}

/// Numerically stable in-place log-softmax.
pub(crate) fn log_softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter_mut().for_each(|l| *l -= lse);
}

impl SoftmaxPolicy {
    pub fn zeros(layout: FeatureLayout, max_len: usize) -> SoftmaxPolicy {
        let n = layout.n_params();
        SoftmaxPolicy {
            layout,
            params: vec![0.0; n],
            temperature: 1.0,
            max_len,
        }
    }

    pub fn from_params(layout: FeatureLayout, params: Vec<f64>, temperature: f64, max_len: usize) -> Result<SoftmaxPolicy> {
        if params.len() != layout.n_params() {
            return Err(HillError::GradientShape {
                expected: layout.n_params(),
                got: params.len(),
            });
        }
        Ok(SoftmaxPolicy {
            layout,
            params,
            temperature,
            max_len,
        })
    }

    /// Every parameter drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng>(layout: FeatureLayout, max_len: usize, scale: f64, rng: &mut R) -> SoftmaxPolicy {
        let mut p = SoftmaxPolicy::zeros(layout, max_len);
        for x in p.params.iter_mut() {
            *x = rng.gen_range(-scale..=scale);
        }
        p
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_tokens(&self) -> usize {
        self.layout.n_tokens()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn shape(&self) -> PolicyShape {
        PolicyShape {
            layout: self.layout.clone(),
            temperature: self.temperature,
            max_len: self.max_len,
        }
    }

    pub fn encode(&self, context: &[Token]) -> EncodedInput {
        self.layout.encode(context)
    }

    /// Raw logits at one step; also fills `rows` with the active rows.
    pub fn logits_into(&self, enc: &EncodedInput, prev: Option<Token>, t: usize, rows: &mut RowSet, out: &mut [f64]) {
        let v = self.n_tokens();
        self.layout.active_rows(enc, prev, t, rows);
        out.iter_mut().for_each(|x| *x = 0.0);
        for &r in rows.iter() {
            let row = &self.params[r * v..(r + 1) * v];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w;
            }
        }
    }

    /// Log-probabilities of the next token at step `t`.
    pub fn step_log_probs(&self, enc: &EncodedInput, prev: Option<Token>, t: usize, out: &mut [f64]) {
        let mut rows = RowSet::new();
        self.logits_into(enc, prev, t, &mut rows, out);
        log_softmax_in_place(out);
    }

    fn is_eos(&self, t: Token) -> bool {
        t == self.layout.vocab.eos()
    }

    /// Autoregressive sampling until EOS or `max_len` tokens.
    pub fn sample<R: Rng>(&self, context: &[Token], rng: &mut R) -> Vec<Token> {
        let enc = self.encode(context);
        self.sample_encoded(&enc, rng)
    }

    pub fn sample_encoded<R: Rng>(&self, enc: &EncodedInput, rng: &mut R) -> Vec<Token> {
        let v = self.n_tokens();
        let mut rows = RowSet::new();
        let mut buf = vec![0.0; v];
        let mut out = Vec::with_capacity(self.max_len);
        let inv_temp = 1.0 / self.temperature;
        for t in 0..self.max_len {
            self.logits_into(enc, out.last().copied(), t, &mut rows, &mut buf);
            buf.iter_mut().for_each(|x| *x *= inv_temp);
            let max = buf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in buf.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = v - 1;
            for (j, &w) in buf.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            let tok = Token(pick as u16);
            out.push(tok);
            if self.is_eos(tok) {
                break;
            }
        }
        out
    }

    /// Teacher-forced log-probability (natural log).
    pub fn logprob(&self, context: &[Token], tokens: &[Token]) -> f64 {
        let enc = self.encode(context);
        self.logprob_encoded(&enc, tokens)
    }

    pub fn logprob_encoded(&self, enc: &EncodedInput, tokens: &[Token]) -> f64 {
        let mut buf = vec![0.0; self.n_tokens()];
        let mut total = 0.0;
        let mut prev = None;
        for (t, &tok) in tokens.iter().enumerate() {
            self.step_log_probs(enc, prev, t, &mut buf);
            total += buf[tok.index()];
            prev = Some(tok);
        }
        total
    }

    /// Per-token log-probabilities, in order.
    pub fn token_logprobs(&self, context: &[Token], tokens: &[Token]) -> Vec<f64> {
        let enc = self.encode(context);
        let mut buf = vec![0.0; self.n_tokens()];
        let mut prev = None;
        tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                self.step_log_probs(&enc, prev, t, &mut buf);
                prev = Some(tok);
                buf[tok.index()]
            })
            .collect()
    }

    pub fn logprob_grad(&self, context: &[Token], tokens: &[Token]) -> GradientVector {
        let mut g = GradientVector::zeros(self.n_params());
        self.accumulate_logprob_grad(context, tokens, |_| 1.0, &mut g.0);
        g
    }

    /// Adds `weight(t) * d log pi(tokens[t] | ..) / d params` for every step into
    /// `grad`.
    pub fn accumulate_logprob_grad(
        &self,
        context: &[Token],
        tokens: &[Token],
        mut weight: impl FnMut(usize) -> f64,
        grad: &mut [f64],
    ) {
        let enc = self.encode(context);
        let v = self.n_tokens();
        let mut rows = RowSet::new();
        let mut buf = vec![0.0; v];
        let mut prev = None;
        for (t, &tok) in tokens.iter().enumerate() {
            let w = weight(t);
            if w != 0.0 {
                self.logits_into(&enc, prev, t, &mut rows, &mut buf);
                log_softmax_in_place(&mut buf);
                for &r in rows.iter() {
                    let g = &mut grad[r * v..(r + 1) * v];
                    for (j, gj) in g.iter_mut().enumerate() {
                        *gj -= w * buf[j].exp();
                    }
                    g[tok.index()] += w;
                }
            }
            prev = Some(tok);
        }
    }

    /// All terminating trajectories with their natural-log probabilities.
    pub fn enumerate_log_distribution(&self, context: &[Token], budget: u128) -> Result<Vec<(Vec<Token>, f64)>> {
        let v = self.n_tokens() as u128;
        let required = v.checked_pow(self.max_len as u32).unwrap_or(u128::MAX);
        if required > budget {
            return Err(HillError::BudgetExceeded { required, budget });
        }
        let enc = self.encode(context);
        let mut out = Vec::new();
        let mut prefix = Vec::with_capacity(self.max_len);
        self.enumerate_rec(&enc, &mut prefix, 0.0, &mut out);
        Ok(out)
    }

    fn enumerate_rec(&self, enc: &EncodedInput, prefix: &mut Vec<Token>, lp: f64, out: &mut Vec<(Vec<Token>, f64)>) {
        let t = prefix.len();
        let mut buf = vec![0.0; self.n_tokens()];
        self.step_log_probs(enc, prefix.last().copied(), t, &mut buf);
        for (j, &l) in buf.iter().enumerate() {
            let tok = Token(j as u16);
            prefix.push(tok);
            if self.is_eos(tok) || t + 1 == self.max_len {
                out.push((prefix.clone(), lp + l));
            } else {
                self.enumerate_rec(enc, prefix, lp + l, out);
            }
            prefix.pop();
        }
    }

    /// All terminating trajectories with exact probabilities.
    pub fn enumerate_distribution(&self, context: &[Token], budget: u128) -> Result<Vec<(Vec<Token>, f64)>> {
        Ok(self
            .enumerate_log_distribution(context, budget)?
            .into_iter()
            .map(|(s, lp)| (s, lp.exp()))
            .collect())
    }

    /// `params - lr * grad`, as a new policy.
    pub fn sgd_step(&self, grad: &GradientVector, lr: f64) -> Result<SoftmaxPolicy> {
        if grad.len() != self.n_params() {
            return Err(HillError::GradientShape {
                expected: self.n_params(),
                got: grad.len(),
            });
        }
        if !grad.is_finite() {
            return Err(HillError::NonFiniteGradient);
        }
        let mut next = self.clone();
        for (p, g) in next.params.iter_mut().zip(&grad.0) {
            *p -= lr * g;
        }
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A layout whose only template is a single hash bucket: the state is
    /// `(prev, pos)` and nothing else.
    fn flat_layout(vocab: Vocab) -> FeatureLayout {
        FeatureLayout::new(vocab, 8, vec![Template::InputHash { buckets: 1 }])
    }

    fn tiny_vocab() -> Vocab {
        // 2 residues + sep + eos + reveal + 0 strategies = 5 tokens
        Vocab::new(2, 0)
    }

    #[test]
    fn uniform_single_step_logprob() {
        let vocab = Vocab::new(2, 0);
        let p = SoftmaxPolicy::zeros(flat_layout(vocab), 1);
        let v = vocab.size() as f64;
        assert!((p.logprob(&[], &[Token(0)]) - (1.0 / v).ln()).abs() < 1e-12);
        assert!((p.logprob(&[], &[Token(0), Token(1)]) - 2.0 * (1.0 / v).ln()).abs() < 1e-12);
    }

    #[test]
    fn enumeration_sums_to_one() {
        let vocab = tiny_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = SoftmaxPolicy::random(flat_layout(vocab), 3, 2.0, &mut rng);
        let dist = p.enumerate_distribution(&[Token(1)], DEFAULT_ENUMERATION_BUDGET).unwrap();
        let total: f64 = dist.iter().map(|(_, q)| q).sum();
        assert!((total - 1.0).abs() < 1e-10);
        for (seq, q) in &dist {
            assert!((p.logprob(&[Token(1)], seq).exp() - q).abs() < 1e-14);
        }
    }

    #[test]
    fn enumeration_budget_is_enforced() {
        let vocab = Vocab::default();
        let p = SoftmaxPolicy::zeros(flat_layout(vocab), 6);
        let err = p.enumerate_distribution(&[], DEFAULT_ENUMERATION_BUDGET).unwrap_err();
        assert!(matches!(err, HillError::BudgetExceeded { .. }));
    }

    #[test]
    fn deterministic_policy_enumerates_one_path() {
        let vocab = tiny_vocab();
        let mut p = SoftmaxPolicy::zeros(flat_layout(vocab), 2);
        let v = vocab.size();
        // every row strongly prefers EOS
        for r in 0..p.layout().n_rows() {
            p.params_mut()[r * v + vocab.eos().index()] = 1000.0;
        }
        let dist = p.enumerate_distribution(&[], DEFAULT_ENUMERATION_BUDGET).unwrap();
        let likely: Vec<_> = dist.iter().filter(|(_, q)| *q > 1e-12).collect();
        assert_eq!(likely.len(), 1);
        assert_eq!(likely[0].0, vec![vocab.eos()]);
        assert!((likely[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_rows_sum_to_zero_and_unvisited_are_zero() {
        let vocab = Vocab::default();
        let layout = FeatureLayout::reasoner(vocab, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = SoftmaxPolicy::random(layout, 4, 1.0, &mut rng);
        let ctx = vec![Token(1), Token(2), vocab.strategy(0)];
        let traj = vec![Token(3), Token(0), vocab.eos()];
        let g = p.logprob_grad(&ctx, &traj);
        let v = vocab.size();
        let enc = p.encode(&ctx);
        let mut visited = std::collections::BTreeSet::new();
        let mut rows = RowSet::new();
        let mut prev = None;
        for (t, &tok) in traj.iter().enumerate() {
            p.layout().active_rows(&enc, prev, t, &mut rows);
            visited.extend(rows.iter().copied());
            prev = Some(tok);
        }
        for r in 0..p.layout().n_rows() {
            let row = &g.0[r * v..(r + 1) * v];
            if visited.contains(&r) {
                assert!(row.iter().sum::<f64>().abs() < 1e-12);
            } else {
                assert!(row.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn sgd_step_edge_cases() {
        let vocab = tiny_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SoftmaxPolicy::random(flat_layout(vocab), 2, 1.0, &mut rng);
        let zero = GradientVector::zeros(p.n_params());
        assert_eq!(p.sgd_step(&zero, 0.5).unwrap(), p);
        let g = p.logprob_grad(&[], &[Token(0), vocab.eos()]);
        assert_eq!(p.sgd_step(&g, 0.0).unwrap(), p);
        let mut bad = g.clone();
        bad.0[0] = f64::NAN;
        assert!(matches!(p.sgd_step(&bad, 0.1), Err(HillError::NonFiniteGradient)));
        // descending on -logprob raises logprob
        let traj = [Token(0), vocab.eos()];
        let mut neg = p.logprob_grad(&[], &traj);
        neg.scale(-1.0);
        let next = p.sgd_step(&neg, 0.01).unwrap();
        assert!(next.logprob(&[], &traj) > p.logprob(&[], &traj));
    }

    #[test]
    fn fixed_seed_sampling_is_reproducible() {
        let vocab = Vocab::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = SoftmaxPolicy::random(FeatureLayout::reasoner(vocab, 8, 4), 5, 1.0, &mut rng);
        let a = p.sample(&[Token(1), Token(2)], &mut ChaCha8Rng::seed_from_u64(77));
        let b = p.sample(&[Token(1), Token(2)], &mut ChaCha8Rng::seed_from_u64(77));
        assert_eq!(a, b);
    }

    #[test]
    fn near_deterministic_softmax_always_samples_argmax() {
        let vocab = tiny_vocab();
        let mut p = SoftmaxPolicy::zeros(flat_layout(vocab), 1);
        let v = vocab.size();
        for r in 0..p.layout().n_rows() {
            p.params_mut()[r * v + 1] = 1000.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            assert_eq!(p.sample(&[], &mut rng), vec![Token(1)]);
        }
    }
}
