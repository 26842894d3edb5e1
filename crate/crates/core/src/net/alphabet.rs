use std::collections::HashMap;

use crate::error::{Error, Result};

/// The 78 real classes of the default alphabet: 52 case-sensitive letters,
/// 10 digits, 15 punctuation marks and the space.
pub const DEFAULT_SYMBOLS: &str =
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789!\"&'()*+,-./:;? ";

/// Output classes of the network. Class 0 is the CTC blank; real symbol
/// `symbols[k]` is class `k + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelAlphabet {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl LabelAlphabet {
    pub const BLANK: usize = 0;

    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        if symbols.is_empty() {
            return Err(Error::config("alphabet needs at least one real symbol"));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (k, &c) in symbols.iter().enumerate() {
            if index.insert(c, k + 1).is_some() {
                return Err(Error::config(format!("duplicate alphabet symbol {c:?}")));
            }
        }
        Ok(LabelAlphabet { symbols, index })
    }

    /// Real symbols in class order, excluding blank.
    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Number of output classes including blank.
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn blank_index(&self) -> usize {
        Self::BLANK
    }

    pub fn class_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, class: usize) -> Option<char> {
        class.checked_sub(1).and_then(|k| self.symbols.get(k)).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    /// Maps text to class indices; fails on characters outside the alphabet.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.class_of(c).ok_or_else(|| Error::Domain(format!("character {c:?} is not in the alphabet"))))
            .collect()
    }

    /// Maps real class indices back to text; blanks and unknown indices are skipped.
    pub fn decode(&self, labels: &[usize]) -> String {
        labels.iter().filter_map(|&k| self.char_of(k)).collect()
    }
}

impl Default for LabelAlphabet {
    fn default() -> Self {
        LabelAlphabet::new(DEFAULT_SYMBOLS.chars()).expect("default symbols are distinct")
    }
}
