use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Charset;

/// Probabilities of the single-edit text alterations and the fixed LM
/// batch size used when topping batches up from a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub p_replace: f64,
    pub p_insert: f64,
    pub p_delete: f64,
    pub p_unchanged: f64,
    pub lm_batch: usize,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            p_replace: 0.2,
            p_insert: 0.05,
            p_delete: 0.05,
            p_unchanged: 0.7,
            lm_batch: 384,
        }
    }
}

impl AugConfig {
    pub fn unchanged_only() -> Self {
        Self {
            p_replace: 0.0,
            p_insert: 0.0,
            p_delete: 0.0,
            p_unchanged: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_replace, self.p_insert, self.p_delete, self.p_unchanged];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("augmentation probabilities out of range: {ps:?}")));
        }
        let total: f64 = ps.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "augmentation probabilities must sum to 1, got {total}"
            )));
        }
        if self.lm_batch == 0 {
            return Err(Error::Config("lm_batch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugOp {
    Replace,
    Insert,
    Delete,
    Unchanged,
}

/// Applies at most one random edit to `text`. Inserts that would exceed
/// `t_max` resolve to no edit.
pub fn saa_perturb(text: &str, cfg: &AugConfig, charset: &Charset, t_max: usize, rng: &mut impl Rng) -> (String, AugOp) {
    let chars: Vec<char> = text.chars().collect();
    let u: f64 = rng.random();
    let op = if u < cfg.p_replace {
        AugOp::Replace
    } else if u < cfg.p_replace + cfg.p_insert {
        AugOp::Insert
    } else if u < cfg.p_replace + cfg.p_insert + cfg.p_delete {
        AugOp::Delete
    } else {
        AugOp::Unchanged
    };
    match op {
        AugOp::Replace if !chars.is_empty() => {
            let mut out = chars;
            let pos = rng.random_range(0..out.len());
            out[pos] = charset.random_symbol_except(out[pos], rng);
            (out.into_iter().collect(), op)
        }
        AugOp::Insert if chars.len() < t_max => {
            let mut out = chars;
            let pos = rng.random_range(0..=out.len());
            out.insert(pos, charset.random_symbol(rng));
            (out.into_iter().collect(), op)
        }
        AugOp::Delete if chars.len() >= 2 => {
            let mut out = chars;
            out.remove(rng.random_range(0..out.len()));
            (out.into_iter().collect(), op)
        }
        _ => (text.to_string(), AugOp::Unchanged),
    }
}

/// Returns exactly `lm_batch` texts: the originals topped up with corpus
/// samples, or a random subset of the originals when there are too many.
pub fn osa_fill(batch_texts: &[String], corpus: &[String], lm_batch: usize, rng: &mut impl Rng) -> Result<Vec<String>> {
    let b_o = batch_texts.len();
    if b_o >= lm_batch {
        let mut picks = sample(rng, b_o, lm_batch).into_vec();
        picks.sort_unstable();
        return Ok(picks.into_iter().map(|i| batch_texts[i].clone()).collect());
    }
    if corpus.is_empty() {
        return Err(Error::Config("online sampling needs a non-empty corpus".into()));
    }
    let mut out = batch_texts.to_vec();
    out.extend((0..lm_batch - b_o).map(|_| corpus[rng.random_range(0..corpus.len())].clone()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn unchanged_only_is_identity() {
        let mut rng = rng_from_seed(1);
        let cs = Charset::default();
        for _ in 0..100 {
            assert_eq!(saa_perturb("hello", &AugConfig::unchanged_only(), &cs, 25, &mut rng).0, "hello");
        }
    }

    #[test]
    fn delete_only_on_two_chars_enumerates() {
        let cfg = AugConfig {
            p_replace: 0.0,
            p_insert: 0.0,
            p_delete: 1.0,
            p_unchanged: 0.0,
            ..AugConfig::default()
        };
        let mut rng = rng_from_seed(2);
        let cs = Charset::default();
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            seen.insert(saa_perturb("ab", &cfg, &cs, 25, &mut rng).0);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn insert_at_cap_resolves_to_unchanged() {
        let cfg = AugConfig {
            p_replace: 0.0,
            p_insert: 1.0,
            p_delete: 0.0,
            p_unchanged: 0.0,
            ..AugConfig::default()
        };
        let mut rng = rng_from_seed(3);
        let (out, op) = saa_perturb("abc", &cfg, &Charset::default(), 3, &mut rng);
        assert_eq!((out.as_str(), op), ("abc", AugOp::Unchanged));
    }

    #[test]
    fn probabilities_must_sum_to_one() {
        let bad = AugConfig {
            p_unchanged: 0.6,
            ..AugConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(AugConfig::default().validate().is_ok());
    }

    #[test]
    fn osa_formula_cases() {
        let corpus: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
        let mut rng = rng_from_seed(4);
        let many: Vec<String> = (0..400).map(|i| format!("b{i}")).collect();
        let out = osa_fill(&many, &corpus, 384, &mut rng).unwrap();
        assert_eq!(out.len(), 384);
        assert!(out.iter().all(|t| t.starts_with('b')));
        let few: Vec<String> = many[..100].to_vec();
        let out = osa_fill(&few, &corpus, 384, &mut rng).unwrap();
        assert_eq!(&out[..100], few.as_slice());
        assert_eq!(out[100..].iter().filter(|t| t.starts_with('w')).count(), 284);
        assert_eq!(osa_fill(&[], &corpus, 384, &mut rng).unwrap().len(), 384);
    }
}
