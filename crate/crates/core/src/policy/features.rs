//! Context-state templates.
//!
//! A context state is the set of table rows active at one decoding step. Each
//! template maps `(input, previous token, position)` to at most a few rows;
//! the step's logits are the sum of the active rows. Every template only looks
//! at the input, the previous generated token and the position, so the whole
//! policy is Markov in `(prev, t)` for a fixed input.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::vocab::{Token, TokenKind, Vocab};

pub type RowSet = SmallVec<[usize; 8]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Template {
    /// `(hash(full input) mod buckets, prev, pos)`.
    InputHash { buckets: usize },
    /// `(chain carry, aligned operand, pos)`; shared by every input with the
    /// same prompt, hinted or not.
    Chain,
    /// One row per hint element present in the input:
    /// `(element, chain carry, aligned operand, pos)`.
    HintElements,
    /// Hinter-side: `(first divergence of the failed rollout from the reference,
    /// class of the reference token there, prev, pos)`.
    Failure { max_div: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub vocab: Vocab,
    pub pos_cap: usize,
    pub templates: Vec<Template>,
    #[serde(skip)]
    offsets: Vec<usize>,
    #[serde(skip)]
    n_rows: usize,
}

/// Parsed view of an input sequence; computed once per rollout.
#[derive(Debug, Clone, Default)]
pub struct EncodedInput {
    hash: u64,
    /// Leading residue run of the input (the question prompt).
    prompt: SmallVec<[usize; 8]>,
    /// Sorted distinct hint elements found after the prompt.
    hint_elements: SmallVec<[usize; 4]>,
    /// `(divergence index, reference-token class)` for hinter inputs.
    failure: Option<(usize, usize)>,
}

impl EncodedInput {
    pub fn hint_elements(&self) -> &[usize] {
        &self.hint_elements
    }

    pub fn failure(&self) -> Option<(usize, usize)> {
        self.failure
    }
}

fn fnv1a(tokens: &[Token]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tokens {
        for b in t.0.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl FeatureLayout {
    pub fn new(vocab: Vocab, pos_cap: usize, templates: Vec<Template>) -> FeatureLayout {
        let mut layout = FeatureLayout {
            vocab,
            pos_cap,
            templates,
            offsets: Vec::new(),
            n_rows: 0,
        };
        layout.finish();
        layout
    }

    /// Recomputes row offsets; needed after deserialization.
    pub fn finish(&mut self) {
        self.offsets.clear();
        let mut acc = 0;
        for t in &self.templates {
            self.offsets.push(acc);
            acc += self.template_rows(t);
        }
        self.n_rows = acc;
    }

    /// The default reasoner layout: input-hash memory, chain skill, hint elements.
    pub fn reasoner(vocab: Vocab, buckets: usize, pos_cap: usize) -> FeatureLayout {
        FeatureLayout::new(
            vocab,
            pos_cap,
            vec![
                Template::InputHash { buckets },
                Template::Chain,
                Template::HintElements,
            ],
        )
    }

    pub fn hinter(vocab: Vocab, buckets: usize, pos_cap: usize, max_div: usize) -> FeatureLayout {
        FeatureLayout::new(
            vocab,
            pos_cap,
            vec![Template::InputHash { buckets }, Template::Failure { max_div }],
        )
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_tokens(&self) -> usize {
        self.vocab.size()
    }

    pub fn n_params(&self) -> usize {
        self.n_rows * self.vocab.size()
    }

    /// Index of the begin-of-response sentinel in the `prev` axis.
    fn bos(&self) -> usize {
        self.vocab.size()
    }

    fn n_pos(&self) -> usize {
        self.pos_cap + 1
    }

    fn template_rows(&self, t: &Template) -> usize {
        let v1 = self.vocab.size() + 1;
        let m1 = self.vocab.modulus + 1;
        let m2 = self.vocab.modulus + 2;
        let p = self.n_pos();
        match *t {
            Template::InputHash { buckets } => buckets.max(1) * v1 * p,
            Template::Chain => m1 * m1 * p,
            Template::HintElements => self.vocab.n_hint_elements() * m1 * m1 * p,
            Template::Failure { max_div } => (max_div + 2) * m2 * v1 * p,
        }
    }

    pub fn encode(&self, input: &[Token]) -> EncodedInput {
        let vocab = &self.vocab;
        let mut enc = EncodedInput {
            hash: fnv1a(input),
            ..Default::default()
        };
        let split = input
            .iter()
            .position(|&t| !vocab.is_residue(t))
            .unwrap_or(input.len());
        enc.prompt = input[..split].iter().map(|t| t.index()).collect();

        let rest = &input[split..];
        let mut i = 0;
        while i < rest.len() {
            match vocab.kind(rest[i]) {
                Some(TokenKind::Strategy(k)) => enc.hint_elements.push(k),
                Some(TokenKind::Reveal) => {
                    if let Some(Some(TokenKind::Residue(r))) = rest.get(i + 1).map(|&t| vocab.kind(t))
                    {
                        enc.hint_elements.push(vocab.n_strategy + r);
                        i += 1;
                    }
                }
                _ => {}
            }
            i += 1;
        }
        enc.hint_elements.sort_unstable();
        enc.hint_elements.dedup();

        if let Some(max_div) = self.templates.iter().find_map(|t| match t {
            Template::Failure { max_div } => Some(*max_div),
            _ => None,
        }) {
            enc.failure = Some(self.parse_failure(input, max_div));
        }
        enc
    }

    /// Hinter inputs are `prompt SEP failed-rollout SEP reference`. The reference
    /// never contains a separator, so it is whatever follows the last one.
    fn parse_failure(&self, input: &[Token], max_div: usize) -> (usize, usize) {
        let vocab = &self.vocab;
        let sep = vocab.sep();
        let m = vocab.modulus;
        let none = (max_div + 1, m + 1);
        let first = input.iter().position(|&t| t == sep);
        let last = input.iter().rposition(|&t| t == sep);
        let (Some(a), Some(b)) = (first, last) else {
            return none;
        };
        if a == b {
            return none;
        }
        let failed = &input[a + 1..b];
        let reference = &input[b + 1..];
        let div = failed
            .iter()
            .zip(reference)
            .position(|(x, y)| x != y)
            .unwrap_or(failed.len().min(reference.len()));
        if div >= reference.len() {
            return none;
        }
        let class = match vocab.kind(reference[div]) {
            Some(TokenKind::Residue(r)) => {
                if reference.get(div + 1) == Some(&vocab.eos()) {
                    m
                } else {
                    r
                }
            }
            _ => m + 1,
        };
        (div.min(max_div), class)
    }

    /// Chain carry at step `t`: the first prompt residue at `t = 0`, otherwise
    /// the previous token when it is a residue. `m` means "none".
    #[inline]
    fn carry(&self, enc: &EncodedInput, prev: Option<Token>, t: usize) -> usize {
        let m = self.vocab.modulus;
        if t == 0 {
            enc.prompt.first().copied().unwrap_or(m)
        } else {
            match prev {
                Some(p) if p.index() < m => p.index(),
                _ => m,
            }
        }
    }

    /// Prompt operand aligned with step `t`; `m` once the prompt is exhausted.
    #[inline]
    fn operand(&self, enc: &EncodedInput, t: usize) -> usize {
        enc.prompt
            .get(t + 1)
            .copied()
            .unwrap_or(self.vocab.modulus)
    }

    /// Rows active when emitting the token at position `t` after `prev`
    /// (`None` at the first step).
    pub fn active_rows(&self, enc: &EncodedInput, prev: Option<Token>, t: usize, out: &mut RowSet) {
        out.clear();
        let p = self.n_pos();
        let pos = t.min(self.pos_cap);
        let prev_ix = prev.map(|x| x.index()).unwrap_or(self.bos());
        let v1 = self.vocab.size() + 1;
        let m1 = self.vocab.modulus + 1;
        let m2 = self.vocab.modulus + 2;
        for (tpl, &off) in self.templates.iter().zip(&self.offsets) {
            match *tpl {
                Template::InputHash { buckets } => {
                    let b = (enc.hash % buckets.max(1) as u64) as usize;
                    out.push(off + (b * v1 + prev_ix) * p + pos);
                }
                Template::Chain => {
                    let c = self.carry(enc, prev, t);
                    let o = self.operand(enc, t);
                    out.push(off + (c * m1 + o) * p + pos);
                }
                Template::HintElements => {
                    let c = self.carry(enc, prev, t);
                    let o = self.operand(enc, t);
                    for &e in &enc.hint_elements {
                        out.push(off + ((e * m1 + c) * m1 + o) * p + pos);
                    }
                }
                Template::Failure { .. } => {
                    let (div, class) = enc.failure.unwrap_or((0, m2 - 1));
                    out.push(off + ((div * m2 + class) * v1 + prev_ix) * p + pos);
                }
            }
        }
    }

    /// Row index of the chain template for explicit coordinates. Used to seed
    /// priors.
    pub fn chain_row(&self, carry: usize, operand: usize, pos: usize) -> Option<usize> {
        let m1 = self.vocab.modulus + 1;
        self.find(|t| matches!(t, Template::Chain))
            .map(|off| off + (carry * m1 + operand) * self.n_pos() + pos)
    }

    pub fn hint_row(&self, element: usize, carry: usize, operand: usize, pos: usize) -> Option<usize> {
        let m1 = self.vocab.modulus + 1;
        self.find(|t| matches!(t, Template::HintElements))
            .map(|off| off + ((element * m1 + carry) * m1 + operand) * self.n_pos() + pos)
    }

    /// `prev = None` addresses the begin-of-response sentinel.
    pub fn failure_row(&self, div: usize, class: usize, prev: Option<Token>, pos: usize) -> Option<usize> {
        let v1 = self.vocab.size() + 1;
        let m2 = self.vocab.modulus + 2;
        let prev_ix = prev.map(|x| x.index()).unwrap_or(self.bos());
        self.find(|t| matches!(t, Template::Failure { .. }))
            .map(|off| off + ((div * m2 + class) * v1 + prev_ix) * self.n_pos() + pos)
    }

    pub fn max_div(&self) -> Option<usize> {
        self.templates.iter().find_map(|t| match t {
            Template::Failure { max_div } => Some(*max_div),
            _ => None,
        })
    }

    fn find(&self, pred: impl Fn(&Template) -> bool) -> Option<usize> {
        self.templates
            .iter()
            .zip(&self.offsets)
            .find(|(t, _)| pred(t))
            .map(|(_, &o)| o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Question;

    #[test]
    fn hinted_and_plain_share_chain_row_but_not_hash_row() {
        let vocab = Vocab::default();
        let layout = FeatureLayout::reasoner(vocab, 64, 8);
        let q = Question::from_chain(&vocab, 0, 2, &[3, 1]);
        let mut hinted = q.prompt.clone();
        hinted.push(vocab.strategy(1));
        let (ep, eh) = (layout.encode(&q.prompt), layout.encode(&hinted));
        let (mut rp, mut rh) = (RowSet::new(), RowSet::new());
        layout.active_rows(&ep, None, 0, &mut rp);
        layout.active_rows(&eh, None, 0, &mut rh);
        assert_eq!(rp.len(), 2);
        assert_eq!(rh.len(), 3);
        assert_eq!(rp[1], rh[1]);
        assert_eq!(rh[2], layout.hint_row(1, 2, 3, 0).unwrap());
        assert!(rh.iter().all(|&r| r < layout.n_rows()));
    }

    #[test]
    fn reveal_pairs_become_elements() {
        let vocab = Vocab::default();
        let layout = FeatureLayout::reasoner(vocab, 64, 8);
        let input = vec![Token(1), Token(2), vocab.reveal(), Token(3), vocab.strategy(2), vocab.strategy(2)];
        let enc = layout.encode(&input);
        assert_eq!(enc.hint_elements(), &[2, vocab.n_strategy + 3]);
    }

    #[test]
    fn failure_parse_finds_first_divergence() {
        let vocab = Vocab::default();
        let layout = FeatureLayout::hinter(vocab, 64, 8, 5);
        let (sep, eos) = (vocab.sep(), vocab.eos());
        // prompt 1 2 3, failed 3 4 EOS, reference 3 1 EOS (1 is the answer)
        let input = vec![Token(1), Token(2), Token(3), sep, Token(3), Token(4), eos, sep, Token(3), Token(1), eos];
        let enc = layout.encode(&input);
        assert_eq!(enc.failure(), Some((1, vocab.modulus)));
        // failure on a non-final step reports the residue itself
        let input = vec![Token(1), Token(2), Token(3), sep, Token(0), Token(1), eos, sep, Token(3), Token(1), eos];
        assert_eq!(layout.encode(&input).failure(), Some((0, 3)));
    }

    #[test]
    fn serde_roundtrip_restores_offsets() {
        let layout = FeatureLayout::reasoner(Vocab::default(), 16, 4);
        let s = serde_json::to_string(&layout).unwrap();
        let mut back: FeatureLayout = serde_json::from_str(&s).unwrap();
        back.finish();
        assert_eq!(back, layout);
        assert_eq!(back.n_params(), layout.n_params());
    }
}
