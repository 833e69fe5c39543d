use crate::error::{Error, Result};
use crate::numerics::{Tensor, MASK_NEG};

/// Additive attention mask: every entry is `0` (visible) or the `-inf`
/// sentinel (hidden).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    t_q: usize,
    t_k: usize,
    entries: Vec<f64>,
}

impl AttentionMask {
    pub fn open(t_q: usize, t_k: usize) -> Self {
        Self {
            t_q,
            t_k,
            entries: vec![0.0; t_q * t_k],
        }
    }

    fn from_fn(t_q: usize, t_k: usize, hidden: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::open(t_q, t_k);
        for i in 0..t_q {
            for j in 0..t_k {
                if hidden(i, j) {
                    m.entries[i * t_k + j] = MASK_NEG;
                }
            }
        }
        m
    }

    /// Cloze mask: each query position is hidden from its own key.
    pub fn diagonal(t: usize) -> Result<Self> {
        if t < 2 {
            return Err(Error::ClozeLengthOne);
        }
        Ok(Self::from_fn(t, t, |i, j| i == j))
    }

    /// Inclusive causal mask: position `i` sees keys `0..=i`.
    pub fn causal(t: usize) -> Self {
        Self::from_fn(t, t, |i, j| j > i)
    }

    /// Hides key columns at or beyond `length` for every query.
    pub fn padding(length: usize, t: usize) -> Result<Self> {
        if length == 0 || length > t {
            return Err(Error::Config(format!(
                "padding length {length} must lie in [1, {t}]"
            )));
        }
        Ok(Self::from_fn(t, t, |_, j| j >= length))
    }

    pub fn padding_batch(lengths: &[usize], t: usize) -> Result<Vec<Self>> {
        lengths.iter().map(|&l| Self::padding(l, t)).collect()
    }

    /// Entrywise minimum: hidden wherever either mask hides.
    pub fn combine(&self, other: &AttentionMask) -> Result<Self> {
        if (self.t_q, self.t_k) != (other.t_q, other.t_k) {
            return Err(Error::shape(
                "mask combine",
                &[self.t_q, self.t_k],
                &[other.t_q, other.t_k],
            ));
        }
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.min(*b))
            .collect();
        Ok(Self {
            t_q: self.t_q,
            t_k: self.t_k,
            entries,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.t_q, self.t_k)
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.t_k + j]
    }

    pub fn is_hidden(&self, i: usize, j: usize) -> bool {
        self.entry(i, j) <= MASK_NEG / 10.0
    }

    /// True when every query row has at least one visible key.
    pub fn rows_have_visible_key(&self) -> bool {
        (0..self.t_q).all(|i| (0..self.t_k).any(|j| !self.is_hidden(i, j)))
    }

    /// Stacks per-instance masks into a `[B, t_q, t_k]` tensor.
    pub fn stack(masks: &[AttentionMask]) -> Result<Tensor> {
        let first = masks
            .first()
            .ok_or_else(|| Error::Config("no masks to stack".into()))?;
        let (tq, tk) = first.dims();
        let mut data = Vec::with_capacity(masks.len() * tq * tk);
        for m in masks {
            if m.dims() != (tq, tk) {
                return Err(Error::shape("mask stack", &[tq, tk], &[m.t_q, m.t_k]));
            }
            data.extend_from_slice(&m.entries);
        }
        Tensor::new(vec![masks.len(), tq, tk], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const N: f64 = MASK_NEG;

    #[test]
    fn diagonal_instances() {
        assert_eq!(
            AttentionMask::diagonal(3).unwrap().entries,
            vec![N, 0.0, 0.0, 0.0, N, 0.0, 0.0, 0.0, N]
        );
        assert_eq!(AttentionMask::diagonal(2).unwrap().entries, vec![N, 0.0, 0.0, N]);
        assert!(matches!(AttentionMask::diagonal(1), Err(Error::ClozeLengthOne)));
    }

    #[test]
    fn causal_instances() {
        assert_eq!(AttentionMask::causal(2).entries, vec![0.0, N, 0.0, 0.0]);
        let m = AttentionMask::causal(5);
        assert!((1..5).all(|j| m.is_hidden(0, j)) && !m.is_hidden(0, 0));
    }

    #[test]
    fn padding_instances() {
        assert_eq!(AttentionMask::padding(4, 4).unwrap(), AttentionMask::open(4, 4));
        let m = AttentionMask::padding(1, 3).unwrap();
        for i in 0..3 {
            assert!(!m.is_hidden(i, 0) && m.is_hidden(i, 1) && m.is_hidden(i, 2));
        }
        assert!(AttentionMask::padding(0, 3).is_err());
    }

    #[test]
    fn diagonal_and_padding_combine_by_minimum() {
        // Enumerate length=2, t=3: row 0 must admit only column 1.
        let m = AttentionMask::diagonal(3)
            .unwrap()
            .combine(&AttentionMask::padding(2, 3).unwrap())
            .unwrap();
        let visible: Vec<usize> = (0..3).filter(|&j| !m.is_hidden(0, j)).collect();
        assert_eq!(visible, vec![1]);
        let visible: Vec<usize> = (0..3).filter(|&j| !m.is_hidden(2, j)).collect();
        assert_eq!(visible, vec![0, 1]);
    }
}
