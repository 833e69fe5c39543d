use crate::error::{Error, Result};
use crate::lm::Charset;
use crate::numerics::Tensor;

const ROW_TOLERANCE: f64 = 1e-6;

/// Per-position character distributions `[T, c]` with the number of
/// positions that carry text (including the end marker).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbSequence {
    pub probs: Tensor,
    pub valid_length: usize,
}

impl ProbSequence {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.shape().len() != 2 {
            return Err(Error::InvalidShape {
                shape: probs.shape().to_vec(),
                reason: "a probability sequence is [T, c]".into(),
            });
        }
        check_normalized(&probs)?;
        let valid_length = predicted_length(&probs, 0, 1);
        Ok(Self { probs, valid_length })
    }

    pub fn len(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn argmax(&self) -> Vec<usize> {
        argmax_rows(&self.probs)
    }

    pub fn decode(&self, charset: &Charset) -> String {
        charset.decode(&self.argmax())
    }
}

/// Fails on the first row that is negative or does not sum to one.
pub fn check_normalized(probs: &Tensor) -> Result<()> {
    for r in 0..probs.rows() {
        let row = probs.row(r);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > ROW_TOLERANCE {
            return Err(Error::NotNormalized { row: r, sum });
        }
    }
    Ok(())
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            t.row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

/// Row-wise softmax over the last axis, computed outside any tape.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.last_dim();
    let mut out = logits.clone();
    out.zero_grad();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Number of positions up to and including the first end-marker argmax,
/// clamped to `[min_len, T]`. Falls back to `T` when no row picks the end
/// marker.
pub fn predicted_length(probs: &Tensor, eos: usize, min_len: usize) -> usize {
    let t = probs.rows();
    let len = argmax_rows(probs)
        .iter()
        .position(|&c| c == eos)
        .map_or(t, |p| p + 1);
    len.clamp(min_len.min(t), t)
}

/// Per-instance predicted lengths of a `[B, T, c]` batch.
pub fn predicted_lengths(batch: &Tensor, eos: usize, min_len: usize) -> Result<Vec<usize>> {
    let s = batch.shape();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected [B, T, c]".into(),
        });
    }
    let (b, t, c) = (s[0], s[1], s[2]);
    (0..b)
        .map(|i| {
            let slice = Tensor::new(vec![t, c], batch.data()[i * t * c..(i + 1) * t * c].to_vec())?;
            Ok(predicted_length(&slice, eos, min_len))
        })
        .collect()
}

/// Encodes `text` followed by the end marker and padding into `t` class
/// indices. Returns the classes and the count of positions that carry text
/// or the end marker.
pub fn encode_padded(charset: &Charset, text: &str, t: usize) -> Result<(Vec<usize>, usize)> {
    let mut classes = charset.encode(text)?;
    if classes.len() + 1 > t {
        return Err(Error::InvalidText {
            text: text.into(),
            reason: format!("longer than {} symbols", t - 1),
        });
    }
    classes.push(charset.eos());
    let valid = classes.len();
    classes.resize(t, charset.pad());
    Ok((classes, valid))
}

/// One-hot `[B, T, c]` batch of padded texts and their valid lengths.
pub fn one_hot_batch(charset: &Charset, texts: &[String], t: usize) -> Result<(Tensor, Vec<usize>)> {
    let c = charset.num_classes();
    let mut data = vec![0.0; texts.len() * t * c];
    let mut lengths = Vec::with_capacity(texts.len());
    for (b, text) in texts.iter().enumerate() {
        let (classes, valid) = encode_padded(charset, text, t)?;
        for (p, &k) in classes.iter().enumerate() {
            data[(b * t + p) * c + k] = 1.0;
        }
        lengths.push(valid);
    }
    Ok((Tensor::new(vec![texts.len(), t, c], data)?, lengths))
}

/// Flattened targets and ignore flags for a batch of texts: positions after
/// the end marker are ignored.
pub fn target_batch(charset: &Charset, texts: &[String], t: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    let mut targets = Vec::with_capacity(texts.len() * t);
    let mut ignore = Vec::with_capacity(texts.len() * t);
    for text in texts {
        let (classes, valid) = encode_padded(charset, text, t)?;
        targets.extend_from_slice(&classes);
        ignore.extend((0..t).map(|p| p >= valid));
    }
    Ok((targets, ignore))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padded_encoding_places_end_marker() {
        let cs = Charset::default();
        let (classes, valid) = encode_padded(&cs, "ab", 5).unwrap();
        assert_eq!(classes, vec![11, 12, 0, 37, 37]);
        assert_eq!(valid, 3);
        assert!(encode_padded(&cs, "abcde", 5).is_err());
    }

    #[test]
    fn predicted_length_uses_first_end_marker() {
        let cs = Charset::default();
        let (oh, _) = one_hot_batch(&cs, &["abc".to_string()], 6).unwrap();
        assert_eq!(predicted_lengths(&oh, 0, 2).unwrap(), vec![4]);
        let no_eos = Tensor::from_fn(&[3, 4], |i| if i % 4 == 1 { 1.0 } else { 0.0 });
        assert_eq!(predicted_length(&no_eos, 0, 2), 3);
        let eos_first = Tensor::from_fn(&[3, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(predicted_length(&eos_first, 0, 2), 2);
    }

    #[test]
    fn normalization_check() {
        assert!(check_normalized(&Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap()).is_ok());
        let err = check_normalized(&Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.7, 0.7]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::NotNormalized { row: 1, .. }));
    }

    #[test]
    fn softmax_rows_is_normalized() {
        let t = Tensor::from_fn(&[3, 5], |i| (i as f64 * 1.7).sin() * 4.0);
        check_normalized(&softmax_rows(&t)).unwrap();
    }
}
