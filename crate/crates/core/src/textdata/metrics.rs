use serde::Serialize;

use crate::error::{Error, Result};

/// Levenshtein distance with unit costs, over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character accuracy is `1 - sum(ed(best, ref)) / sum(len(ref))`, floored at
/// zero, where `best` is the first candidate.
pub const CHAR_ACCURACY_DEFINITION: &str =
    "char_accuracy = max(0, 1 - sum(edit_distance(top1, ref)) / sum(len(ref)))";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub char_accuracy: f64,
    /// `word_accuracy_at[k - 1]` is the fraction of references matched by
    /// any of the first `k` candidates.
    pub word_accuracy_at: Vec<f64>,
    /// Counts of top-1 edit distance 0, 1, 2 and 3 or more.
    pub ed_histogram: [usize; 4],
}

impl Metrics {
    pub fn word_accuracy(&self) -> f64 {
        self.word_accuracy_at.last().copied().unwrap_or(0.0)
    }

    pub fn top1(&self) -> f64 {
        self.word_accuracy_at.first().copied().unwrap_or(0.0)
    }
}

pub fn metrics(predictions: &[Vec<String>], references: &[String]) -> Result<Metrics> {
    if predictions.len() != references.len() {
        return Err(Error::shape(
            "metrics",
            &[predictions.len()],
            &[references.len()],
        ));
    }
    let k = predictions.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut hits = vec![0usize; k];
    let mut total_ed = 0usize;
    let mut total_len = 0usize;
    let mut hist = [0usize; 4];
    for (cands, reference) in predictions.iter().zip(references) {
        if let Some(first_hit) = cands.iter().position(|c| c == reference) {
            hits[first_hit..].iter_mut().for_each(|h| *h += 1);
        }
        let best = cands.first().map(String::as_str).unwrap_or("");
        let ed = edit_distance(best, reference);
        total_ed += ed;
        total_len += reference.chars().count();
        hist[ed.min(3)] += 1;
    }
    let n = references.len().max(1) as f64;
    let char_accuracy = if total_len == 0 {
        1.0
    } else {
        (1.0 - total_ed as f64 / total_len as f64).max(0.0)
    };
    Ok(Metrics {
        char_accuracy,
        word_accuracy_at: hits.into_iter().map(|h| h as f64 / n).collect(),
        ed_histogram: hist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exponential-time recursive definition, used as the oracle.
    fn ed_oracle(a: &[char], b: &[char]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = ed_oracle(ra, rb) + usize::from(x != y);
                sub.min(ed_oracle(ra, b) + 1).min(ed_oracle(a, rb) + 1)
            }
        }
    }

    #[test]
    fn classic_values() {
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("same", "same"), 0);
        assert_eq!(edit_distance("", "abc"), 3);
    }

    #[test]
    fn single_substitution_metrics() {
        let m = metrics(&[vec!["cat".into()]], &["cut".into()]).unwrap();
        assert_eq!(m.top1(), 0.0);
        assert!((m.char_accuracy - (1.0 - 1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(m.ed_histogram, [0, 1, 0, 0]);
    }

    #[test]
    fn exact_predictions_score_one() {
        let refs: Vec<String> = vec!["a".into(), "bc".into()];
        let preds: Vec<Vec<String>> = refs.iter().map(|r| vec![r.clone()]).collect();
        let m = metrics(&preds, &refs).unwrap();
        assert_eq!((m.char_accuracy, m.word_accuracy()), (1.0, 1.0));
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        assert!(metrics(&[vec![]], &[]).is_err());
    }

    proptest! {
        #[test]
        fn matches_recursive_oracle(a in "[abc]{0,6}", b in "[abc]{0,6}") {
            let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
            prop_assert_eq!(edit_distance(&a, &b), ed_oracle(&ca, &cb));
        }

        #[test]
        fn symmetric_and_triangle(a in "[a-d]{0,8}", b in "[a-d]{0,8}", c in "[a-d]{0,8}") {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        }

        #[test]
        fn topk_accuracy_is_monotone(cands in proptest::collection::vec(proptest::collection::vec("[ab]{1,2}", 3), 1..20),
                                     refs_seed in proptest::collection::vec("[ab]{1,2}", 20)) {
            let refs: Vec<String> = refs_seed[..cands.len()].to_vec();
            let m = metrics(&cands, &refs).unwrap();
            prop_assert!(m.word_accuracy_at.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
