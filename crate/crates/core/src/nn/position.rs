use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Sinusoidal encodings: `PE[p, 2i] = sin(p / 10000^(2i/d))` and
/// `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(t: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 || d == 0 {
        return Err(Error::Config(format!(
            "positional encoding width must be even, got {d}"
        )));
    }
    if t == 0 {
        return Err(Error::Config("positional encoding length must be >= 1".into()));
    }
    Ok(Tensor::from_fn(&[t, d], |k| {
        let (p, j) = (k / d, k % d);
        let i = j / 2;
        let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Row-major `[h * w, d]` encodings: the first half of the channels encodes
/// the row index, the second half the column index.
pub fn positional_encoding_2d(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d % 4 != 0 {
        return Err(Error::Config(format!(
            "2-D positional encoding width must be divisible by 4, got {d}"
        )));
    }
    let half = d / 2;
    let rows = positional_encoding(h, half)?;
    let cols = positional_encoding(w, half)?;
    Ok(Tensor::from_fn(&[h * w, d], |k| {
        let (pos, j) = (k / d, k % d);
        let (y, x) = (pos / w, pos % w);
        if j < half {
            rows.data()[y * half + j]
        } else {
            cols.data()[x * half + j - half]
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_row_is_sin_cos_of_zero() {
        let pe = positional_encoding(4, 8).unwrap();
        assert_eq!(pe.data()[0], 0.0);
        assert_eq!(pe.data()[1], 1.0);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn adjacent_rows_differ_in_at_least_half_the_coordinates() {
        let pe = positional_encoding(2, 64).unwrap();
        let differing = (0..64).filter(|&j| pe.row(0)[j] != pe.row(1)[j]).count();
        assert!(differing >= 32, "{differing}");
    }

    #[test]
    fn odd_width_is_rejected() {
        assert!(positional_encoding(3, 7).is_err());
    }
}
