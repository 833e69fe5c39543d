use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_SYMBOLS: &str = "0123456789abcdefghijklmnopqrstuvwxyz";

/// Ordered symbol table with two reserved classes: end-of-sequence at index
/// 0 and padding at the last index. Text is case-folded on ingest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charset {
    symbols: Vec<char>,
}

impl Default for Charset {
    fn default() -> Self {
        Self::from_symbols(DEFAULT_SYMBOLS).expect("default symbols are valid")
    }
}

impl Charset {
    pub fn from_symbols(symbols: &str) -> Result<Self> {
        let mut seen = Vec::new();
        for ch in symbols.chars() {
            if ch.is_uppercase() || seen.contains(&ch) {
                return Err(Error::Config(format!(
                    "charset symbols must be unique and lower-case, offending {ch:?}"
                )));
            }
            seen.push(ch);
        }
        if seen.is_empty() {
            return Err(Error::Config("charset needs at least one symbol".into()));
        }
        Ok(Self { symbols: seen })
    }

    /// Total class count including the two reserved classes.
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn num_symbols(&self) -> usize {
        self.symbols.len()
    }

    pub fn eos(&self) -> usize {
        0
    }

    pub fn pad(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn symbols(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn fold(ch: char) -> char {
        ch.to_lowercase().next().unwrap_or(ch)
    }

    pub fn contains(&self, ch: char) -> bool {
        self.symbols.contains(&Self::fold(ch))
    }

    pub fn class_of(&self, ch: char) -> Option<usize> {
        let ch = Self::fold(ch);
        self.symbols.iter().position(|&s| s == ch).map(|i| i + 1)
    }

    pub fn symbol(&self, class: usize) -> Option<char> {
        (1..=self.symbols.len())
            .contains(&class)
            .then(|| self.symbols[class - 1])
    }

    /// Case-folds `text` and maps it to classes; rejects empty text and any
    /// symbol outside the table.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        if text.is_empty() {
            return Err(Error::InvalidText {
                text: text.into(),
                reason: "empty".into(),
            });
        }
        text.chars()
            .map(|c| {
                self.class_of(c).ok_or_else(|| Error::InvalidText {
                    text: text.into(),
                    reason: format!("symbol {c:?} not in charset"),
                })
            })
            .collect()
    }

    /// Maps classes back to text, stopping at the first end marker and
    /// skipping padding.
    pub fn decode(&self, classes: &[usize]) -> String {
        classes
            .iter()
            .take_while(|&&c| c != self.eos())
            .filter_map(|&c| self.symbol(c))
            .collect()
    }

    pub fn normalize(&self, text: &str) -> Option<String> {
        let folded: String = text.chars().map(Self::fold).collect();
        folded.chars().all(|c| self.contains(c)).then_some(folded)
    }

    pub fn random_symbol(&self, rng: &mut impl Rng) -> char {
        self.symbols[rng.random_range(0..self.symbols.len())]
    }

    /// A uniformly chosen symbol different from `avoid`.
    pub fn random_symbol_except(&self, avoid: char, rng: &mut impl Rng) -> char {
        debug_assert!(self.symbols.len() > 1);
        loop {
            let c = self.random_symbol(rng);
            if c != avoid {
                return c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_has_36_symbols_plus_reserved() {
        let cs = Charset::default();
        assert_eq!(cs.num_classes(), 38);
        assert_eq!(cs.eos(), 0);
        assert_eq!(cs.pad(), 37);
    }

    #[test]
    fn encode_decode_round_trip_case_folds() {
        let cs = Charset::default();
        let enc = cs.encode("HeLLo42").unwrap();
        assert_eq!(cs.decode(&enc), "hello42");
        let mut with_eos = enc.clone();
        with_eos.extend([cs.eos(), 5, cs.pad()]);
        assert_eq!(cs.decode(&with_eos), "hello42");
    }

    #[test]
    fn rejects_empty_and_foreign_text() {
        let cs = Charset::default();
        assert!(cs.encode("").is_err());
        assert!(cs.encode("héllo").is_err());
    }
}
