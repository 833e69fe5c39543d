//! Central-difference gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Relative error floor: differences are measured relative to
/// `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Extra, tenfold smaller steps tried when the first estimate disagrees.
const STEP_RETRIES: usize = 2;
/// Agreement at which no smaller step is tried.
const SETTLED: f64 = 1e-7;

/// Relative error of `analytic` against central differences of `eval`,
/// where `eval(d)` evaluates the function with one coordinate shifted by
/// `d`. A point of non-differentiability within the step spoils one
/// estimate but not all of `h`, `h / 10`, `h / 100`, while a wrong gradient
/// disagrees at every step; the best agreement is reported.
fn difference_error(analytic: f64, mut eval: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let mut h = h;
    let mut best = f64::INFINITY;
    for _ in 0..=STEP_RETRIES {
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        best = best.min(relative_error(analytic, numeric));
        if best < SETTLED {
            break;
        }
        h /= 10.0;
    }
    Ok(best)
}

/// Max relative error between the recorded gradient of `f` at `x` and
/// central differences `(f(x+h) - f(x-h)) / 2h`, over every coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut worst = 0.0f64;
    for k in 0..x.numel() {
        let err = difference_error(
            analytic[k],
            |d| {
                let mut shifted = x.clone();
                shifted.data_mut()[k] += d;
                eval(shifted)
            },
            h,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Checks parameter gradients of a scalar function of a [`ParamStore`].
/// At most `coords_per_tensor` randomly chosen coordinates of each tensor
/// are perturbed.
pub fn check_param_grads<F>(
    store: &ParamStore,
    f: F,
    h: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<ParamCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?;
        tape.param_grads()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let out = f(&mut tape)?;
        Ok(tape.value(out).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ParamCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let mut work = store.clone();
    for id in store.ids() {
        let n = store.get(id).numel();
        let analytic = grads.get(id);
        let picks: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, coords_per_tensor).into_vec()
        };
        for k in picks {
            let orig = store.get(id).data()[k];
            let a = analytic.map_or(0.0, |g| g[k]);
            let err = difference_error(
                a,
                |d| {
                    work.get_mut(id).data_mut()[k] = orig + d;
                    eval(&work)
                },
                h,
            )?;
            work.get_mut(id).data_mut()[k] = orig;
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact_enough() {
        let x = Tensor::from_fn(&[5], |i| i as f64 * 0.3 - 0.7);
        let err = finite_diff_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn kinks_are_stepped_around() {
        let x = Tensor::new(vec![1], vec![3e-7]).unwrap();
        let err = finite_diff_check(|t, x| Ok(t.relu(x)), &x, 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn a_wrong_gradient_fails_at_every_step() {
        let x = Tensor::new(vec![1], vec![0.7]).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let frozen = t.stop_gradient(x);
                t.mul(frozen, x)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!((err - 0.5).abs() < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_comparison_is_a_failure() {
        assert_eq!(relative_error(f64::NAN, 1.0), f64::INFINITY);
    }
}
