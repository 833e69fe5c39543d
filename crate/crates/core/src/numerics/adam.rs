use crate::error::{Error, Result};
use crate::numerics::ParamStore;

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optional global gradient-norm clip applied before the update.
    pub clip_norm: Option<f64>,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers, indexed like the parameter store.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// Restores a state captured with [`AdamState::moments`].
    pub fn restore(&mut self, step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Result<()> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(m, v)| m.len() != v.len()) {
            return Err(Error::Checkpoint("optimizer moment buffers disagree".into()));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Applies one update using the gradients stored on each parameter.
    /// Parameters without a gradient buffer are left untouched. Any
    /// non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = params.ids().collect();
        let mut sq = 0.0;
        for &id in &ids {
            if let Some(g) = params.get(id).grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(params.name(id).to_string()));
                }
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let scale = match self.clip_norm {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };
        if self.first.len() < ids.len() {
            for &id in &ids[self.first.len()..] {
                let n = params.get(id).numel();
                self.first.push(vec![0.0; n]);
                self.second.push(vec![0.0; n]);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for &id in &ids {
            let tensor = params.get_mut(id);
            let Some(g) = tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.first[id.0], &mut self.second[id.0]);
            debug_assert_eq!(m.len(), g.len());
            for (k, w) in tensor.data_mut().iter_mut().enumerate() {
                let gk = g[k] * scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn one_param(w: f64) -> (ParamStore, crate::numerics::ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::scalar(w));
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = one_param(0.37);
        store.get_mut(id).accumulate_grad(&[0.0]).unwrap();
        let mut adam = AdamState::new(0.1);
        for _ in 0..5 {
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.get(id).item(), 0.37);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        // m1 = (1-b1) g, v1 = (1-b2) g^2, so mhat / sqrt(vhat) = sign(g).
        for g in [1e-4, 0.3, 250.0] {
            let (mut store, id) = one_param(0.0);
            store.get_mut(id).accumulate_grad(&[g]).unwrap();
            let mut adam = AdamState::new(0.01);
            adam.step(&mut store).unwrap();
            let expected = -0.01 * g / (g + 1e-8);
            assert!((store.get(id).item() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_converges_like_scalar_recurrence() {
        // Oracle: the Adam recurrence run directly on f(w) = w^2.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let (mut w, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=200 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        assert!(w.abs() < 1e-2, "oracle itself must converge: {w}");

        let (mut store, id) = one_param(1.0);
        let mut adam = AdamState::new(lr);
        for _ in 0..200 {
            store.zero_grad();
            let g = 2.0 * store.get(id).item();
            store.get_mut(id).accumulate_grad(&[g]).unwrap();
            adam.step(&mut store).unwrap();
        }
        assert!((store.get(id).item() - w).abs() < 1e-12);
        assert!(store.get(id).item().abs() < 1e-2);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut store, id) = one_param(1.0);
        store.get_mut(id).accumulate_grad(&[f64::NAN]).unwrap();
        let err = AdamState::new(0.1).step(&mut store).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(store.get(id).item(), 1.0);
    }
}
