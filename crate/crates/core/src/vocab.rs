//! Token vocabulary.
//!
//! Layout for modulus `m` and `k` strategy tokens:
//!
//! ```text
//! 0 .. m-1        residue tokens
//! m               separator (also the begin-of-response sentinel)
//! m+1             end-of-sequence
//! m+2             REVEAL (hint grammar: must be followed by one residue)
//! m+3 .. m+3+k-1  strategy-class tokens (hint grammar)
//! ```

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u16);

impl Token {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// What a token is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Residue(usize),
    Separator,
    Eos,
    Reveal,
    Strategy(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub modulus: usize,
    pub n_strategy: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab {
            modulus: 5,
            n_strategy: 4,
        }
    }
}

impl Vocab {
    pub fn new(modulus: usize, n_strategy: usize) -> Self {
        assert!(modulus >= 2, "modulus must be at least 2");
        Vocab {
            modulus,
            n_strategy,
        }
    }

    pub fn size(&self) -> usize {
        self.modulus + 3 + self.n_strategy
    }

    pub fn residue(&self, r: usize) -> Token {
        assert!(r < self.modulus);
        Token(r as u16)
    }

    pub fn sep(&self) -> Token {
        Token(self.modulus as u16)
    }

    pub fn eos(&self) -> Token {
        Token(self.modulus as u16 + 1)
    }

    pub fn reveal(&self) -> Token {
        Token(self.modulus as u16 + 2)
    }

    pub fn strategy(&self, k: usize) -> Token {
        assert!(k < self.n_strategy);
        Token((self.modulus + 3 + k) as u16)
    }

    pub fn kind(&self, t: Token) -> Option<TokenKind> {
        let i = t.index();
        let m = self.modulus;
        match i {
            _ if i < m => Some(TokenKind::Residue(i)),
            _ if i == m => Some(TokenKind::Separator),
            _ if i == m + 1 => Some(TokenKind::Eos),
            _ if i == m + 2 => Some(TokenKind::Reveal),
            _ if i < self.size() => Some(TokenKind::Strategy(i - m - 3)),
            _ => None,
        }
    }

    pub fn is_residue(&self, t: Token) -> bool {
        t.index() < self.modulus
    }

    pub fn is_hint_grammar(&self, t: Token) -> bool {
        matches!(
            self.kind(t),
            Some(TokenKind::Reveal) | Some(TokenKind::Strategy(_))
        )
    }

    /// Number of distinct hint elements: one per strategy token plus one per
    /// revealable residue.
    pub fn n_hint_elements(&self) -> usize {
        self.n_strategy + self.modulus
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_has_twelve_tokens() {
        let v = Vocab::default();
        assert_eq!(v.size(), 12);
    }

    #[test]
    fn partitions_are_disjoint_and_cover() {
        let v = Vocab::new(7, 3);
        let mut residues = 0;
        let mut grammar = 0;
        let mut other = 0;
        for i in 0..v.size() {
            let t = Token(i as u16);
            let r = v.is_residue(t);
            let g = v.is_hint_grammar(t);
            assert!(!(r && g));
            if r {
                residues += 1;
            } else if g {
                grammar += 1;
            } else {
                other += 1;
            }
        }
        assert_eq!(residues, 7);
        assert_eq!(grammar, 4);
        assert_eq!(other, 2);
        assert_eq!(v.kind(Token(v.size() as u16)), None);
    }
}
