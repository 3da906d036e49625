use crate::error::{config_err, Result};
use crate::model::{RESERVED, UNK};
use std::collections::HashMap;

/// Character vocabulary. Ids below [`RESERVED`] are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

const SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

impl Vocab {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        let mut index = HashMap::new();
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, RESERVED + i).is_some() {
                return Err(config_err(format!("duplicate vocabulary character {c:?}")));
            }
        }
        Ok(Self { chars, index })
    }

    /// `a`, `b`, ... for a synthetic alphabet of `size` symbols.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size > SYMBOLS.len() {
            return Err(config_err(format!(
                "at most {} synthetic symbols, got {size}",
                SYMBOLS.len()
            )));
        }
        Self::new(SYMBOLS.chars().take(size))
    }

    /// Total ids including the reserved ones.
    pub fn size(&self) -> usize {
        RESERVED + self.chars.len()
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Special tokens are dropped, except UNK which renders as `?`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| match id {
                UNK => Some('?'),
                id if id < RESERVED => None,
                id => self.chars.get(id - RESERVED).copied().or(Some('?')),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BOS, EOS};

    #[test]
    fn examples() {
        let v = Vocab::synthetic(5).unwrap();
        assert_eq!(v.tokenize("abc"), vec![RESERVED, RESERVED + 1, RESERVED + 2]);
        assert_eq!(v.detokenize(&v.tokenize("ecab")), "ecab");
        assert_eq!(v.tokenize("az"), vec![RESERVED, UNK]);
        assert_eq!(v.detokenize(&[BOS, RESERVED + 1, EOS]), "b");
        assert_eq!(v.size(), 9);
        assert!(Vocab::new("aa".chars()).is_err());
        assert!(Vocab::synthetic(100).is_err());
    }
}
