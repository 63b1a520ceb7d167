//! Initial parameter tables.
//!
//! Neither policy starts from zero. The reasoner starts with partial chain
//! competence (weak on steps that wrap around the modulus) and a built-in
//! reading of the hint grammar; the hinter starts out emitting well-formed short hints with no
//! preference between them.

use serde::{Deserialize, Serialize};

use super::{FeatureLayout, SoftmaxPolicy};
use crate::vocab::{Token, TokenKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerPrior {
    /// Logit on the correct residue at chain step `t` when the step does not
    /// wrap around the modulus; the last entry repeats.
    pub chain_logit_by_pos: Vec<f64>,
    /// Same, for steps with `carry + operand >= m`.
    pub wrap_logit_by_pos: Vec<f64>,
    /// Logit on EOS once the prompt operands are exhausted.
    pub eos_logit: f64,
    /// Logit on separator and hint-grammar tokens in every chain row.
    pub special_logit: f64,
    /// Extra logit a strategy token `k` puts on the correct residue at step `k`.
    pub strategy_boost: f64,
    /// Extra logit a revealed residue puts on itself wherever it is the
    /// correct result of the step.
    pub reveal_boost: f64,
}

impl Default for ReasonerPrior {
    fn default() -> Self {
        ReasonerPrior {
            chain_logit_by_pos: vec![3.0],
            wrap_logit_by_pos: vec![-1.5],
            eos_logit: 3.0,
            special_logit: -4.0,
            strategy_boost: 2.5,
            reveal_boost: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HinterPrior {
    /// First hint token: logit on REVEAL and on each strategy token.
    pub open_grammar_logit: f64,
    /// Added to the REVEAL logit at the first hint token.
    pub open_reveal_bias: f64,
    /// Logit on tokens outside the hint grammar, at the first token and after
    /// a complete hint element.
    pub open_other_logit: f64,
    /// After REVEAL: logit on residues.
    pub reveal_residue_logit: f64,
    /// After a complete hint element: logit on EOS.
    pub stop_logit: f64,
}

impl Default for HinterPrior {
    fn default() -> Self {
        HinterPrior {
            open_grammar_logit: 2.0,
            open_reveal_bias: 0.0,
            open_other_logit: -2.0,
            reveal_residue_logit: 3.0,
            stop_logit: 1.5,
        }
    }
}

fn logit_at(table: &[f64], pos: usize) -> f64 {
    table
        .get(pos)
        .or_else(|| table.last())
        .copied()
        .unwrap_or(0.0)
}

pub fn reasoner(layout: FeatureLayout, max_len: usize, prior: &ReasonerPrior) -> SoftmaxPolicy {
    let vocab = layout.vocab;
    let m = vocab.modulus;
    let v = vocab.size();
    let mut policy = SoftmaxPolicy::zeros(layout.clone(), max_len);
    let params = policy.params_mut();
    let specials: Vec<usize> = (0..v)
        .filter(|&j| {
            matches!(
                vocab.kind(Token(j as u16)),
                Some(TokenKind::Separator | TokenKind::Reveal | TokenKind::Strategy(_))
            )
        })
        .collect();

    for pos in 0..=layout.pos_cap {
        for carry in 0..=m {
            for operand in 0..=m {
                let Some(row) = layout.chain_row(carry, operand, pos) else {
                    continue;
                };
                let base = row * v;
                for &s in &specials {
                    params[base + s] = prior.special_logit;
                }
                if operand == m {
                    params[base + vocab.eos().index()] = prior.eos_logit;
                } else if carry < m {
                    let table = if carry + operand >= m {
                        &prior.wrap_logit_by_pos
                    } else {
                        &prior.chain_logit_by_pos
                    };
                    params[base + (carry + operand) % m] = logit_at(table, pos);
                }
            }
        }
    }

    for pos in 0..=layout.pos_cap {
        for carry in 0..m {
            for operand in 0..m {
                let correct = (carry + operand) % m;
                if pos < vocab.n_strategy {
                    if let Some(row) = layout.hint_row(pos, carry, operand, pos) {
                        params[row * v + correct] += prior.strategy_boost;
                    }
                }
                if let Some(row) = layout.hint_row(vocab.n_strategy + correct, carry, operand, pos) {
                    params[row * v + correct] += prior.reveal_boost;
                }
            }
        }
    }
    policy
}

pub fn hinter(layout: FeatureLayout, max_len: usize, prior: &HinterPrior) -> SoftmaxPolicy {
    let vocab = layout.vocab;
    let m = vocab.modulus;
    let v = vocab.size();
    let Some(max_div) = layout.max_div() else {
        return SoftmaxPolicy::zeros(layout, max_len);
    };
    let mut policy = SoftmaxPolicy::zeros(layout.clone(), max_len);
    let params = policy.params_mut();
    let kinds: Vec<TokenKind> = (0..v).map(|j| vocab.kind(Token(j as u16)).expect("in vocab")).collect();

    for div in 0..=max_div + 1 {
        for class in 0..m + 2 {
            for pos in 0..=layout.pos_cap {
                let open = layout.failure_row(div, class, None, pos).expect("failure template");
                for (j, k) in kinds.iter().enumerate() {
                    params[open * v + j] = match k {
                        TokenKind::Reveal => prior.open_grammar_logit + prior.open_reveal_bias,
                        TokenKind::Strategy(_) => prior.open_grammar_logit,
                        _ => prior.open_other_logit,
                    };
                }
                let after_reveal = layout
                    .failure_row(div, class, Some(vocab.reveal()), pos)
                    .expect("failure template");
                for (j, k) in kinds.iter().enumerate() {
                    if matches!(k, TokenKind::Residue(_)) {
                        params[after_reveal * v + j] = prior.reveal_residue_logit;
                    }
                }
                for (p, kp) in kinds.iter().enumerate() {
                    if matches!(kp, TokenKind::Residue(_) | TokenKind::Strategy(_)) {
                        let row = layout
                            .failure_row(div, class, Some(Token(p as u16)), pos)
                            .expect("failure template");
                        for (j, k) in kinds.iter().enumerate() {
                            params[row * v + j] = match k {
                                TokenKind::Eos => prior.stop_logit,
                                TokenKind::Reveal | TokenKind::Strategy(_) => 0.0,
                                _ => prior.open_other_logit,
                            };
                        }
                    }
                }
            }
        }
    }
    policy
}
