//! Modular-arithmetic chain tasks, hint validity rules and exact success
//! probabilities.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{compose_hinted_input, verify, Question};
use crate::error::{HillError, Result};
use crate::policy::SoftmaxPolicy;
use crate::vocab::{Token, TokenKind, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFamilyConfig {
    pub vocab: Vocab,
    pub d_min: usize,
    pub d_max: usize,
    pub max_hint_len: usize,
    pub max_context: usize,
    /// Insert a separator between the prompt and the hint.
    pub hint_separator: bool,
}

impl Default for TaskFamilyConfig {
    fn default() -> Self {
        TaskFamilyConfig {
            vocab: Vocab::default(),
            d_min: 1,
            d_max: 4,
            max_hint_len: 3,
            max_context: 7,
            hint_separator: false,
        }
    }
}

impl TaskFamilyConfig {
    pub fn max_prompt_len(&self) -> usize {
        self.d_max + 1
    }

    /// Long enough for the reference solution of the hardest question.
    pub fn max_response_len(&self) -> usize {
        self.d_max + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab.modulus < 2 {
            return Err(HillError::Config("modulus must be >= 2".into()));
        }
        if self.d_min == 0 || self.d_min > self.d_max {
            return Err(HillError::Config("need 1 <= d_min <= d_max".into()));
        }
        if self.max_hint_len == 0 {
            return Err(HillError::Config("max_hint_len must be >= 1".into()));
        }
        Ok(())
    }

    pub fn generate_question<R: Rng>(&self, id: u64, difficulty: usize, rng: &mut R) -> Question {
        assert!(
            (self.d_min..=self.d_max).contains(&difficulty),
            "difficulty {difficulty} outside [{}, {}]",
            self.d_min,
            self.d_max
        );
        let m = self.vocab.modulus;
        let start = rng.gen_range(0..m);
        let operands: Vec<usize> = (0..difficulty).map(|_| rng.gen_range(0..m)).collect();
        Question::from_chain(&self.vocab, id, start, &operands)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    FormatViolation,
    AnswerLeak,
    ContextOverflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HintValidity {
    Valid,
    Invalid(InvalidReason),
}

impl HintValidity {
    pub fn is_valid(&self) -> bool {
        matches!(self, HintValidity::Valid)
    }

    pub fn reason(&self) -> Option<InvalidReason> {
        match self {
            HintValidity::Valid => None,
            HintValidity::Invalid(r) => Some(*r),
        }
    }
}

/// A hint is a non-empty sequence of strategy tokens and `REVEAL r` pairs of
/// at most `max_len` tokens.
fn well_formed(vocab: &Vocab, hint: &[Token], max_len: usize) -> bool {
    if hint.is_empty() || hint.len() > max_len {
        return false;
    }
    let mut i = 0;
    while i < hint.len() {
        match vocab.kind(hint[i]) {
            Some(TokenKind::Strategy(_)) => i += 1,
            Some(TokenKind::Reveal) => match hint.get(i + 1).and_then(|&t| vocab.kind(t)) {
                Some(TokenKind::Residue(_)) => i += 2,
                _ => return false,
            },
            _ => return false,
        }
    }
    true
}

/// Rules are checked in the fixed order format, answer leak, context overflow.
pub fn check_hint_validity(
    task: &TaskFamilyConfig,
    question: &Question,
    hint: &[Token],
    max_context: usize,
) -> HintValidity {
    if !well_formed(&task.vocab, hint, task.max_hint_len) {
        return HintValidity::Invalid(InvalidReason::FormatViolation);
    }
    if hint.contains(&question.answer) {
        return HintValidity::Invalid(InvalidReason::AnswerLeak);
    }
    if compose_hinted_input(&task.vocab, question, hint, max_context, task.hint_separator).is_err() {
        return HintValidity::Invalid(InvalidReason::ContextOverflow);
    }
    HintValidity::Valid
}

/// Exact success probability by full enumeration of the trajectory tree.
pub fn exact_success_prob(
    policy: &SoftmaxPolicy,
    question: &Question,
    input: &[Token],
    budget: u128,
) -> Result<f64> {
    let vocab = policy.layout().vocab;
    Ok(policy
        .enumerate_distribution(input, budget)?
        .into_iter()
        .filter(|(seq, _)| verify(&vocab, question, seq) == 1)
        .map(|(_, p)| p)
        .sum())
}

/// Exact success probability by dynamic programming over
/// `(previous token, last residue seen)`; agrees with [`exact_success_prob`]
/// and has no enumeration budget.
pub fn success_prob(policy: &SoftmaxPolicy, question: &Question, input: &[Token]) -> f64 {
    let vocab = policy.layout().vocab;
    let v = vocab.size();
    let m = vocab.modulus;
    let eos = vocab.eos().index();
    let answer = question.answer.index();
    let enc = policy.encode(input);
    // state index: prev in 0..=v (v = start), last residue in 0..=m (m = none)
    let n_last = m + 1;
    let mut mass = vec![0.0f64; (v + 1) * n_last];
    mass[v * n_last + m] = 1.0;
    let mut next = vec![0.0f64; mass.len()];
    let mut buf = vec![0.0; v];
    let mut success = 0.0;
    for t in 0..policy.max_len {
        next.iter_mut().for_each(|x| *x = 0.0);
        let last_step = t + 1 == policy.max_len;
        for prev in 0..=v {
            let prev_tok = (prev < v).then_some(Token(prev as u16));
            let row = &mass[prev * n_last..(prev + 1) * n_last];
            if row.iter().all(|&x| x == 0.0) {
                continue;
            }
            policy.step_log_probs(&enc, prev_tok, t, &mut buf);
            for (last, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (j, &lp) in buf.iter().enumerate() {
                    let p = w * lp.exp();
                    let new_last = if j < m { j } else { last };
                    if j == eos || last_step {
                        if new_last == answer {
                            success += p;
                        }
                    } else {
                        next[j * n_last + new_last] += p;
                    }
                }
            }
        }
        std::mem::swap(&mut mass, &mut next);
    }
    success
}

pub fn write_questions<W: Write>(questions: &[Question], mut w: W) -> Result<()> {
    for q in questions {
        serde_json::to_writer(&mut w, q)?;
        w.write_all(b"\n").map_err(|e| HillError::io("<questions>", e))?;
    }
    Ok(())
}

pub fn read_questions<R: BufRead>(r: R) -> Result<Vec<Question>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| HillError::io("<questions>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
