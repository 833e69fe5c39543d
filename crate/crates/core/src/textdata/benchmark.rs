use std::io::Write;
use std::path::Path;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Charset;
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EditCategory {
    AddOrRemove,
    Replace,
    Unchanged,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchItem {
    pub noisy: String,
    pub clean: String,
    pub category: EditCategory,
}

/// Fractions of (add-or-remove, replace, unchanged) items.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchRatios {
    pub add_or_remove: f64,
    pub replace: f64,
    pub unchanged: f64,
}

impl Default for BenchRatios {
    fn default() -> Self {
        Self {
            add_or_remove: 0.2,
            replace: 0.6,
            unchanged: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpellingBenchmark {
    pub items: Vec<BenchItem>,
    pub ratios: BenchRatios,
    pub seed: u64,
}

impl SpellingBenchmark {
    pub fn count(&self, category: EditCategory) -> usize {
        self.items.iter().filter(|i| i.category == category).count()
    }

    /// Two-column tab-separated `noisy\tclean` lines.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for item in &self.items {
            writeln!(f, "{}\t{}", item.noisy, item.clean).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Reads pairs written by [`write_tsv`](Self::write_tsv). Categories are
    /// reconstructed from the pair itself.
    pub fn read_tsv(path: &Path) -> Result<Vec<BenchItem>> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        raw.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let (noisy, clean) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::Config(format!("benchmark line without a tab: {line:?}")))?;
                let category = if noisy == clean {
                    EditCategory::Unchanged
                } else if noisy.chars().count() == clean.chars().count() {
                    EditCategory::Replace
                } else {
                    EditCategory::AddOrRemove
                };
                Ok(BenchItem {
                    noisy: noisy.into(),
                    clean: clean.into(),
                    category,
                })
            })
            .collect()
    }
}

/// Builds a spelling-correction test set. Words shorter than 3 symbols are
/// excluded so that removal leaves at least 2. Category counts are
/// floor-rounded with the remainder assigned to the unchanged category.
/// Sampling is without replacement unless `allow_replacement` is set, in
/// which case it is used only when the filtered corpus is smaller than `n`.
pub fn make_spelling_benchmark(
    corpus: &[String],
    n: usize,
    ratios: BenchRatios,
    seed: u64,
    charset: &Charset,
    t_max: usize,
    allow_replacement: bool,
) -> Result<SpellingBenchmark> {
    let pool: Vec<&String> = corpus
        .iter()
        .filter(|w| (3..=t_max).contains(&w.chars().count()))
        .collect();
    if pool.is_empty() || (pool.len() < n && !allow_replacement) {
        return Err(Error::Config(format!(
            "benchmark needs {n} words of length >= 3, corpus offers {}",
            pool.len()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let words: Vec<String> = if pool.len() >= n {
        sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i].clone()).collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect()
    };
    let n_add = (ratios.add_or_remove * n as f64).floor() as usize;
    let n_rep = (ratios.replace * n as f64).floor() as usize;
    let mut items = Vec::with_capacity(n);
    for (i, clean) in words.into_iter().enumerate() {
        let mut chars: Vec<char> = clean.chars().collect();
        let category = if i < n_add {
            let insert = rng.random_bool(0.5) && chars.len() < t_max;
            if insert {
                let pos = rng.random_range(0..=chars.len());
                chars.insert(pos, charset.random_symbol(&mut rng));
            } else {
                chars.remove(rng.random_range(0..chars.len()));
            }
            EditCategory::AddOrRemove
        } else if i < n_add + n_rep {
            let pos = rng.random_range(0..chars.len());
            chars[pos] = charset.random_symbol_except(chars[pos], &mut rng);
            EditCategory::Replace
        } else {
            EditCategory::Unchanged
        };
        items.push(BenchItem {
            noisy: chars.into_iter().collect(),
            clean,
            category,
        });
    }
    items.shuffle(&mut rng);
    Ok(SpellingBenchmark { items, ratios, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textdata::edit_distance;

    fn corpus() -> Vec<String> {
        crate::textdata::embedded_words(3, 12)
    }

    #[test]
    fn ratio_arithmetic_for_ten_items() {
        let b = make_spelling_benchmark(&corpus(), 10, BenchRatios::default(), 1, &Charset::default(), 25, false).unwrap();
        assert_eq!(b.count(EditCategory::AddOrRemove), 2);
        assert_eq!(b.count(EditCategory::Replace), 6);
        assert_eq!(b.count(EditCategory::Unchanged), 2);
    }

    #[test]
    fn categories_have_the_promised_edits() {
        let b = make_spelling_benchmark(&corpus(), 500, BenchRatios::default(), 2, &Charset::default(), 25, false).unwrap();
        for item in &b.items {
            let ed = edit_distance(&item.noisy, &item.clean);
            match item.category {
                EditCategory::Replace => {
                    assert_eq!(ed, 1);
                    assert_eq!(item.noisy.len(), item.clean.len());
                }
                EditCategory::AddOrRemove => {
                    assert_eq!(ed, 1);
                    assert_ne!(item.noisy.len(), item.clean.len());
                    assert!(item.noisy.len() >= 2);
                }
                EditCategory::Unchanged => assert_eq!(item.noisy, item.clean),
            }
        }
    }

    #[test]
    fn same_seed_same_benchmark() {
        let a = make_spelling_benchmark(&corpus(), 50, BenchRatios::default(), 9, &Charset::default(), 25, false).unwrap();
        let b = make_spelling_benchmark(&corpus(), 50, BenchRatios::default(), 9, &Charset::default(), 25, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_corpus_is_an_error() {
        let small = vec!["abc".to_string(), "de".to_string()];
        assert!(make_spelling_benchmark(&small, 5, BenchRatios::default(), 1, &Charset::default(), 25, false).is_err());
        let b = make_spelling_benchmark(&small, 5, BenchRatios::default(), 1, &Charset::default(), 25, true).unwrap();
        assert_eq!(b.items.len(), 5);
    }
}
