use std::cmp::Ordering;

use crate::lm::{Charset, ProbSequence};
use crate::numerics::Tensor;

/// A decoded class sequence with its summed log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub classes: Vec<usize>,
    pub score: f64,
}

fn by_score_then_lex(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.classes.cmp(&b.classes))
}

/// Beam search over independent per-position distributions `[T, c]`,
/// maximizing the sum of log-probabilities. With `eos` set, a hypothesis
/// that emits the end marker is complete and stops accumulating score.
/// Returns at most `k` candidates ordered by score, ties broken by the
/// lexicographic order of the class sequence.
pub fn topk_decode(probs: &Tensor, k: usize, eos: Option<usize>) -> Vec<Candidate> {
    let k = k.max(1);
    let (t, c) = (probs.rows(), probs.last_dim());
    let mut beam = vec![Candidate {
        classes: Vec::new(),
        score: 0.0,
    }];
    for p in 0..t {
        let row = probs.row(p);
        let mut next = Vec::with_capacity(beam.len() * c);
        for cand in &beam {
            if eos.is_some_and(|e| cand.classes.last() == Some(&e)) {
                next.push(cand.clone());
                continue;
            }
            for (j, &pj) in row.iter().enumerate() {
                let mut classes = cand.classes.clone();
                classes.push(j);
                next.push(Candidate {
                    classes,
                    score: cand.score + pj.ln(),
                });
            }
        }
        next.sort_by(by_score_then_lex);
        next.truncate(k);
        beam = next;
    }
    beam
}

/// Top-`k` strings for a corrected sequence. Distinct class sequences that
/// decode to the same string are merged, keeping the best score.
pub fn topk_strings(seq: &ProbSequence, charset: &Charset, k: usize) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::with_capacity(k);
    let mut width = k;
    loop {
        out.clear();
        let cands = topk_decode(&seq.probs, width, Some(charset.eos()));
        for cand in &cands {
            let text = charset.decode(&cand.classes);
            if !out.iter().any(|(s, _)| *s == text) {
                out.push((text, cand.score));
            }
        }
        if out.len() >= k || cands.len() < width {
            out.truncate(k);
            return out;
        }
        width *= 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_two_by_two_order() {
        let p = Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.6, 0.4]).unwrap();
        let out = topk_decode(&p, 4, None);
        let got: Vec<(Vec<usize>, f64)> = out.iter().map(|c| (c.classes.clone(), c.score.exp())).collect();
        let want = [(vec![0, 0], 0.54), (vec![0, 1], 0.36), (vec![1, 0], 0.06), (vec![1, 1], 0.04)];
        for ((gc, gp), (wc, wp)) in got.iter().zip(want.iter()) {
            assert_eq!(gc, wc);
            assert!((gp - wp).abs() < 1e-12);
        }
    }

    #[test]
    fn width_one_is_greedy() {
        let p = Tensor::new(vec![3, 3], vec![0.2, 0.5, 0.3, 0.6, 0.3, 0.1, 0.1, 0.1, 0.8]).unwrap();
        assert_eq!(topk_decode(&p, 1, None)[0].classes, vec![1, 0, 2]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let p = Tensor::full(&[2, 2], 0.5);
        let out: Vec<_> = topk_decode(&p, 4, None).into_iter().map(|c| c.classes).collect();
        assert_eq!(out, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }

    fn brute_force(p: &Tensor) -> Vec<Candidate> {
        let (t, c) = (p.rows(), p.last_dim());
        let mut all = Vec::new();
        for code in 0..c.pow(t as u32) {
            let mut x = code;
            let mut classes = vec![0; t];
            for slot in classes.iter_mut().rev() {
                *slot = x % c;
                x /= c;
            }
            let score = classes.iter().enumerate().map(|(i, &k)| p.row(i)[k].ln()).sum();
            all.push(Candidate { classes, score });
        }
        all.sort_by(by_score_then_lex);
        all
    }

    proptest! {
        #[test]
        fn exhaustive_width_enumerates_everything(t in 1usize..=3, c in 1usize..=4, seed in 0u64..1000) {
            let raw = Tensor::from_fn(&[t, c], |i| ((i as u64 * 7919 + seed * 104729) % 97) as f64 + 1.0);
            let mut p = raw.clone();
            for r in 0..t {
                let s: f64 = raw.row(r).iter().sum();
                for j in 0..c {
                    p.data_mut()[r * c + j] /= s;
                }
            }
            let beam = topk_decode(&p, c.pow(t as u32), None);
            let oracle = brute_force(&p);
            prop_assert_eq!(beam.len(), oracle.len());
            let mut seen: Vec<_> = beam.iter().map(|c| c.classes.clone()).collect();
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), oracle.len());
            for (a, b) in beam.iter().zip(&oracle) {
                prop_assert!((a.score - b.score).abs() < 1e-12);
            }
            prop_assert!(beam.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }
}
