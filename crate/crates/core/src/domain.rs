//! Shared domain values: questions, trajectories, hinted inputs and rollout groups.

use serde::{Deserialize, Serialize};

use crate::error::{HillError, Result};
use crate::grpo::{group_advantages, AdvantageConfig};
use crate::vocab::{Token, Vocab};

/// A verifiable task instance. The prompt is `[a0, c1, .., cd]`; the chain
/// computes `s_t = s_{t-1} + c_t (mod m)` starting from `s_0 = a0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: u64,
    pub prompt: Vec<Token>,
    pub answer: Token,
    /// `[s1, .., sd, EOS]`; only the hinter ever sees it.
    pub reference_solution: Vec<Token>,
    pub difficulty: usize,
}

impl Question {
    /// Builds the question for an explicit chain. `operands` must be non-empty.
    pub fn from_chain(vocab: &Vocab, id: u64, start: usize, operands: &[usize]) -> Question {
        assert!(!operands.is_empty(), "a chain needs at least one operation");
        let m = vocab.modulus;
        let mut prompt = Vec::with_capacity(operands.len() + 1);
        prompt.push(vocab.residue(start % m));
        let mut reference = Vec::with_capacity(operands.len() + 1);
        let mut acc = start % m;
        for &c in operands {
            prompt.push(vocab.residue(c % m));
            acc = (acc + c) % m;
            reference.push(vocab.residue(acc));
        }
        reference.push(vocab.eos());
        Question {
            id,
            prompt,
            answer: vocab.residue(acc),
            reference_solution: reference,
            difficulty: operands.len(),
        }
    }
}

/// Binary verifier: 1 iff the last residue before the first EOS (or before the
/// end of the sequence when no EOS was emitted) equals the answer.
pub fn verify(vocab: &Vocab, question: &Question, tokens: &[Token]) -> u8 {
    let eos = vocab.eos();
    let last = tokens
        .iter()
        .take_while(|&&t| t != eos)
        .filter(|&&t| vocab.is_residue(t))
        .last();
    match last {
        Some(&t) if t == question.answer => 1,
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<Token>,
    reward: u8,
    /// Natural-log probability under the hinted input it was sampled from.
    pub logprob_hinted: Option<f64>,
    /// Teacher-forced log probability under the plain question.
    pub logprob_plain: Option<f64>,
}

impl Trajectory {
    pub fn scored(vocab: &Vocab, question: &Question, tokens: Vec<Token>) -> Trajectory {
        let reward = verify(vocab, question, &tokens);
        Trajectory {
            tokens,
            reward,
            logprob_hinted: None,
            logprob_plain: None,
        }
    }

    pub fn reward(&self) -> u8 {
        self.reward
    }

    pub fn is_correct(&self) -> bool {
        self.reward == 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HintedInput {
    pub question_id: u64,
    pub hint: Vec<Token>,
    pub composed: Vec<Token>,
}

/// Appends `hint` to the question prompt. With `separator` set a single
/// separator token is inserted between them.
pub fn compose_hinted_input(
    vocab: &Vocab,
    question: &Question,
    hint: &[Token],
    max_context: usize,
    separator: bool,
) -> Result<HintedInput> {
    debug_assert!(!hint.is_empty(), "hint must be non-empty");
    let mut composed = question.prompt.clone();
    if separator {
        composed.push(vocab.sep());
    }
    composed.extend_from_slice(hint);
    if composed.len() > max_context {
        return Err(HillError::ContextOverflow {
            len: composed.len(),
            max: max_context,
        });
    }
    Ok(HintedInput {
        question_id: question.id,
        hint: hint.to_vec(),
        composed,
    })
}

/// `G` trajectories sampled under one input, with their group-normalized
/// advantages.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    /// The exact token sequence the trajectories were sampled under.
    pub input: Vec<Token>,
    /// The hint when `input` is a hinted composition.
    pub hint: Option<Vec<Token>>,
    pub trajectories: Vec<Trajectory>,
    pub success_rate: f64,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(
        input: Vec<Token>,
        hint: Option<Vec<Token>>,
        trajectories: Vec<Trajectory>,
        cfg: &AdvantageConfig,
    ) -> RolloutGroup {
        let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward() as f64).collect();
        let n_correct: usize = trajectories.iter().map(|t| t.reward() as usize).sum();
        let success_rate = n_correct as f64 / trajectories.len() as f64;
        let advantages = group_advantages(&rewards, cfg);
        RolloutGroup {
            input,
            hint,
            trajectories,
            success_rate,
            advantages,
        }
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn n_correct(&self) -> usize {
        self.trajectories.iter().filter(|t| t.is_correct()).count()
    }

    pub fn correct(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(|t| t.is_correct())
    }
}
