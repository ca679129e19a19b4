use std::collections::BTreeMap;

use crate::error::{CoreError, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;

/// Characters of the standard alphabet, in id order after the specials.
pub const STANDARD_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789 ._,;()=+-*/\n";

/// Character-level vocabulary: PAD, BOS, EOS followed by a fixed alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: BTreeMap<char, TokenId>,
}

impl Vocab {
    pub fn standard() -> Self {
        Self::with_alphabet(STANDARD_ALPHABET)
    }

    /// A vocabulary over a custom alphabet; handy for micro test models.
    pub fn with_alphabet(alphabet: &str) -> Self {
        let chars: Vec<char> = alphabet.chars().collect();
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + 3))
            .collect();
        Self { chars, index }
    }

    pub fn size(&self) -> usize {
        self.chars.len() + 3
    }

    pub fn alphabet(&self) -> &[char] {
        &self.chars
    }

    pub fn char_id(&self, c: char) -> Option<TokenId> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .enumerate()
            .map(|(offset, ch)| {
                self.index
                    .get(&ch)
                    .copied()
                    .ok_or(CoreError::Encoding { ch, offset })
            })
            .collect()
    }

    /// Inverse of [`Vocab::encode`] on character tokens; the PAD/BOS/EOS
    /// specials render as nothing so generated sequences always decode.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<String> {
        let mut out = String::with_capacity(tokens.len());
        for &t in tokens {
            if t >= self.size() {
                return Err(CoreError::Vocabulary {
                    id: t,
                    vocab: self.size(),
                });
            }
            if t >= 3 {
                out.push(self.chars[t - 3]);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_identity() {
        let v = Vocab::standard();
        let toks = v.encode("ab").unwrap();
        assert_eq!(toks.len(), 2);
        assert_eq!(v.decode(&toks).unwrap(), "ab");
    }

    #[test]
    fn empty_round_trip() {
        let v = Vocab::standard();
        assert_eq!(v.encode("").unwrap(), Vec::<TokenId>::new());
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn out_of_alphabet_char_reports_offset() {
        let v = Vocab::standard();
        match v.encode("ab#") {
            Err(CoreError::Encoding { ch, offset }) => {
                assert_eq!(ch, '#');
                assert_eq!(offset, 2);
            }
            other => panic!("expected encoding error, got {other:?}"),
        }
    }

    #[test]
    fn ids_are_dense_and_pad_is_zero() {
        let v = Vocab::standard();
        assert_eq!(PAD, 0);
        let max = v.size() - 1;
        assert_eq!(v.char_id('\n').unwrap(), max);
        assert_eq!(v.char_id('a').unwrap(), 3);
    }
}
