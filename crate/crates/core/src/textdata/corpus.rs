use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::Charset;

/// The bundled desk-scale word list (lower-case English words, one per line).
pub const EMBEDDED_WORDS: &str = include_str!("../../data/words.txt");

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub texts: Vec<String>,
    /// Lines dropped for containing symbols outside the charset.
    pub dropped_charset: usize,
    /// Lines dropped for exceeding the length cap.
    pub dropped_length: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CorpusOptions {
    pub dedup: bool,
    pub t_max: usize,
    pub min_len: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            dedup: true,
            t_max: 25,
            min_len: 1,
        }
    }
}

/// Case-folds, filters and optionally deduplicates raw lines.
pub fn parse_corpus(raw: &str, charset: &Charset, opts: CorpusOptions) -> Result<Corpus> {
    let mut out = Corpus::default();
    let mut seen = HashSet::new();
    for line in raw.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some(text) = charset.normalize(line) else {
            out.dropped_charset += 1;
            continue;
        };
        let len = text.chars().count();
        if len > opts.t_max || len < opts.min_len {
            out.dropped_length += 1;
            continue;
        }
        if opts.dedup && !seen.insert(text.clone()) {
            continue;
        }
        out.texts.push(text);
    }
    if out.texts.is_empty() {
        return Err(Error::Config("corpus is empty after filtering".into()));
    }
    Ok(out)
}

pub fn load_corpus(path: &Path, charset: &Charset, opts: CorpusOptions) -> Result<Corpus> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&raw, charset, opts)
}

/// The embedded word list filtered to lengths in `[min_len, max_len]`.
pub fn embedded_words(min_len: usize, max_len: usize) -> Vec<String> {
    EMBEDDED_WORDS
        .lines()
        .map(str::trim)
        .filter(|w| (min_len..=max_len).contains(&w.chars().count()))
        .map(String::from)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dedup_case_folds() {
        let c = parse_corpus("Cat\ncat\n", &Charset::default(), CorpusOptions::default()).unwrap();
        assert_eq!(c.texts, vec!["cat"]);
    }

    #[test]
    fn foreign_symbols_are_dropped_and_counted() {
        let c = parse_corpus("héllo\nworld\n", &Charset::default(), CorpusOptions::default()).unwrap();
        assert_eq!(c.texts, vec!["world"]);
        assert_eq!(c.dropped_charset, 1);
    }

    #[test]
    fn empty_result_is_an_error() {
        assert!(parse_corpus("é\n", &Charset::default(), CorpusOptions::default()).is_err());
    }

    #[test]
    fn embedded_list_is_large_enough() {
        assert!(embedded_words(3, 12).len() >= 5000);
    }
}
