use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

/// Gated combination of vision and language features with a classifier.
#[derive(Clone, Debug)]
pub struct Fusion {
    /// Gate weights `[2d, d]`.
    pub w_f: ParamId,
    pub cls: Linear,
}

/// Fused features and the gate that produced them, both `[B, T, d]`.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub fused: Var,
    pub gate: Var,
    pub logits: Var,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, classes: usize, rng: &mut Rng) -> Self {
        Self {
            w_f: store.register(format!("{prefix}.w_f"), Tensor::glorot(2 * d, d, rng)),
            cls: Linear::new(store, &format!("{prefix}.cls"), d, classes, true, rng),
        }
    }

    /// `G = sigmoid([F_v, F_l] W_f)`, `F_f = G * F_v + (1 - G) * F_l`.
    pub fn forward(&self, tape: &mut Tape, fv: Var, fl: Var) -> Result<FusionOutput> {
        let both = tape.concat_last(fv, fl)?;
        let w = tape.param(self.w_f);
        let pre = tape.matmul(both, w)?;
        let gate = tape.sigmoid(pre);
        self.forward_with_gate(tape, fv, fl, gate)
    }

    /// Combines with an explicit gate of the feature shape.
    pub fn forward_with_gate(&self, tape: &mut Tape, fv: Var, fl: Var, gate: Var) -> Result<FusionOutput> {
        if tape.shape(fv) != tape.shape(fl) {
            return Err(Error::shape("fuse", tape.shape(fv), tape.shape(fl)));
        }
        let ones = tape.constant(Tensor::full(tape.shape(gate), 1.0));
        let keep_l = tape.sub(ones, gate)?;
        let from_v = tape.mul(gate, fv)?;
        let from_l = tape.mul(keep_l, fl)?;
        let fused = tape.add(from_v, from_l)?;
        let logits = self.cls.forward(tape, fused)?;
        Ok(FusionOutput { fused, gate, logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn setup() -> (ParamStore, Fusion, Tensor, Tensor) {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(4);
        let f = Fusion::new(&mut store, "fusion", 4, 6, &mut rng);
        let fv = Tensor::uniform(&[2, 3, 4], 2.0, &mut rng);
        let fl = Tensor::uniform(&[2, 3, 4], 2.0, &mut rng);
        (store, f, fv, fl)
    }

    #[test]
    fn gate_endpoints_select_one_modality() {
        let (store, f, fv, fl) = setup();
        for (g, want) in [(1.0, &fv), (0.0, &fl)] {
            let mut tape = Tape::with_params(&store);
            let (a, b) = (tape.constant(fv.clone()), tape.constant(fl.clone()));
            let gate = tape.constant(Tensor::full(&[2, 3, 4], g));
            let out = f.forward_with_gate(&mut tape, a, b, gate).unwrap();
            assert_eq!(tape.value(out.fused).data(), want.data());
        }
    }

    #[test]
    fn fused_lies_between_inputs() {
        let (store, f, fv, fl) = setup();
        let mut tape = Tape::with_params(&store);
        let (a, b) = (tape.constant(fv.clone()), tape.constant(fl.clone()));
        let out = f.forward(&mut tape, a, b).unwrap();
        for ((x, y), z) in fv.data().iter().zip(fl.data()).zip(tape.value(out.fused).data()) {
            assert!(*z >= x.min(*y) - 1e-12 && *z <= x.max(*y) + 1e-12);
        }
        assert_eq!(tape.shape(out.logits), &[2, 3, 6]);
    }

    #[test]
    fn mismatched_features_are_rejected() {
        let (store, f, fv, _) = setup();
        let mut tape = Tape::with_params(&store);
        let a = tape.constant(fv);
        let b = tape.constant(Tensor::zeros(&[2, 3, 5]));
        assert!(f.forward(&mut tape, a, b).is_err());
    }
}
