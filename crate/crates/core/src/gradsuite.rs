//! Finite-difference gradient suite over every differentiable operation and
//! every composed block.

use std::time::Instant;

use crate::error::Result;
use crate::fusion::{total_loss, Fusion, LossTargets, Pipeline, PipelineConfig};
use crate::lm::{EnsembleLm, LanguageModel, LmConfig, LmVariant};
use crate::nn::{
    AttentionMask, BcnLayer, BlockConfig, Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention, TransformerEncoderLayer,
};
use crate::numerics::{check_param_grads, finite_diff_check, ConvGeom, ParamStore, Tape, Tensor, Var};
use crate::rng::{Rng, SeedTree};
use crate::vision::{AttnMode, Backbone, SequenceModel, SmnVariant, UNet, VisionConfig, VisionModel};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-6;
/// Coordinates perturbed per parameter tensor in block checks.
pub const COORDS_PER_TENSOR: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseKind {
    Op,
    Block,
}

/// A named check returning the worst relative error for one seed.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub kind: CaseKind,
    check: fn(&mut Rng) -> Result<f64>,
}

impl GradCase {
    pub fn run(&self, seed: u64) -> Result<f64> {
        (self.check)(&mut SeedTree::new(seed).rng(self.name))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub kind: CaseKind,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    pub seconds: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn run_case(case: &GradCase, seeds: std::ops::Range<u64>) -> Result<CaseResult> {
    let start = Instant::now();
    let mut res = CaseResult {
        name: case.name,
        kind: case.kind,
        seeds: seeds.clone().count(),
        max_rel_err: 0.0,
        worst_seed: seeds.start,
        seconds: 0.0,
    };
    for s in seeds {
        let err = case.run(s)?;
        if err > res.max_rel_err || err.is_nan() {
            res.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            res.worst_seed = s;
        }
    }
    res.seconds = start.elapsed().as_secs_f64();
    Ok(res)
}

/// Runs every case over seeds `0..seeds`.
pub fn run_suite(seeds: u64) -> Result<Vec<CaseResult>> {
    cases().iter().map(|c| run_case(c, 0..seeds)).collect()
}

fn rand(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Random values bounded away from zero, so kinks are never straddled.
fn off_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = rand(shape, rng);
    t.data_mut().iter_mut().for_each(|v| *v += 0.1f64.copysign(*v));
    t
}

fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Checks `f` with respect to each input in turn, the others held constant.
/// Outputs are reduced with fixed random weights.
fn check_op<F>(inputs: &[Tensor], rng: &mut Rng, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let shape = {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        t.shape(out).to_vec()
    };
    let weights = rand(&shape, rng);
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let err = finite_diff_check(
            |t, x| {
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| if j == i { x } else { t.constant(v.clone()) })
                    .collect();
                let out = f(t, &vs)?;
                project(t, out, &weights)
            },
            &inputs[i],
            STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Adds small noise to every parameter so that zero-initialized biases and
/// tables do not place ReLU inputs exactly on their kink.
fn jitter(store: &ParamStore, rng: &mut Rng) -> ParamStore {
    let mut s = store.clone();
    let ids: Vec<_> = s.ids().collect();
    for id in ids {
        let t = s.get_mut(id);
        let noise = Tensor::uniform(t.shape(), 0.1, rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
    s
}

/// Checks every parameter gradient of a block whose output is reduced with
/// fixed random weights.
fn check_block<F>(store: &ParamStore, rng: &mut Rng, f: F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let store = &jitter(store, rng);
    let shape = {
        let mut t = Tape::with_params(store);
        let out = f(&mut t)?;
        t.shape(out).to_vec()
    };
    let weights = rand(&shape, rng);
    let seed = rand::Rng::random(rng);
    let report = check_param_grads(
        store,
        |t| {
            let out = f(t)?;
            project(t, out, &weights)
        },
        STEP,
        COORDS_PER_TENSOR,
        seed,
    )?;
    Ok(report.max_rel_err)
}

fn random_mask(b: usize, t: usize, rng: &mut Rng) -> Result<Tensor> {
    let masks = (0..b)
        .map(|_| {
            let len = rand::Rng::random_range(rng, 2..=t);
            AttentionMask::diagonal(t)?.combine(&AttentionMask::padding(len, t)?)
        })
        .collect::<Result<Vec<_>>>()?;
    AttentionMask::stack(&masks)
}

fn block_cfg() -> BlockConfig {
    BlockConfig::new(8, 2).without_dropout()
}

fn tiny_vision(mode: AttnMode, smn: SmnVariant, hfa: bool) -> VisionConfig {
    let mut cfg = VisionConfig {
        t_max: 3,
        d: 8,
        heads: 2,
        channels: (2, 4),
        smn,
        smn_layers: 1,
        symbols: "abc".into(),
        ..VisionConfig::default()
    };
    cfg.unet.strides = vec![(2, 2), (2, 1), (1, 3)];
    cfg.unet.hfa = hfa;
    cfg.unet.hfa_layers = 1;
    cfg.attn.mode = mode;
    cfg.attn.iters = 2;
    cfg
}

fn tiny_lm(variant: LmVariant) -> LmConfig {
    LmConfig {
        layers: 2,
        block: block_cfg(),
        t_max: 3,
        variant,
        symbols: "abc".into(),
        ..LmConfig::default()
    }
}

fn distributions(b: usize, t: usize, c: usize, rng: &mut Rng) -> Tensor {
    let mut x = rand(&[b, t, c], rng);
    for row in x.data_mut().chunks_mut(c) {
        let s: f64 = row.iter_mut().map(|v| {
            *v = v.exp();
            *v
        }).sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    x
}

macro_rules! case {
    ($kind:ident, $name:literal, $f:expr) => {
        GradCase {
            name: $name,
            kind: CaseKind::$kind,
            check: $f,
        }
    };
}

/// Every case of the suite.
pub fn cases() -> Vec<GradCase> {
    let mut v = op_cases();
    v.extend(block_cases());
    v
}

fn op_cases() -> Vec<GradCase> {
    vec![
        case!(Op, "add", |r| check_op(&[rand(&[3, 4], r), rand(&[3, 4], r)], r, |t, x| t.add(x[0], x[1]))),
        case!(Op, "sub", |r| check_op(&[rand(&[3, 4], r), rand(&[3, 4], r)], r, |t, x| t.sub(x[0], x[1]))),
        case!(Op, "mul", |r| check_op(&[rand(&[3, 4], r), rand(&[3, 4], r)], r, |t, x| t.mul(x[0], x[1]))),
        case!(Op, "add_broadcast", |r| check_op(&[rand(&[2, 3, 4], r), rand(&[3, 4], r)], r, |t, x| {
            t.add_broadcast(x[0], x[1])
        })),
        case!(Op, "scale", |r| check_op(&[rand(&[5], r)], r, |t, x| Ok(t.scale(x[0], -1.7)))),
        case!(Op, "sigmoid", |r| check_op(&[rand(&[6], r)], r, |t, x| Ok(t.sigmoid(x[0])))),
        case!(Op, "relu", |r| check_op(&[off_zero(&[8], r)], r, |t, x| Ok(t.relu(x[0])))),
        case!(Op, "gelu", |r| check_op(&[rand(&[8], r)], r, |t, x| Ok(t.gelu(x[0])))),
        case!(Op, "dropout", |r| {
            let seed = rand::Rng::random(r);
            check_op(&[rand(&[4, 5], r)], r, move |t, x| {
                t.enable_dropout(seed);
                Ok(t.dropout(x[0], 0.3))
            })
        }),
        case!(Op, "matmul", |r| check_op(&[rand(&[2, 3, 4], r), rand(&[4, 5], r)], r, |t, x| t.matmul(x[0], x[1]))),
        case!(Op, "affine", |r| check_op(&[rand(&[3, 4], r), rand(&[4, 2], r), rand(&[2], r)], r, |t, x| {
            t.affine(x[0], x[1], Some(x[2]))
        })),
        case!(Op, "bmm", |r| check_op(&[rand(&[2, 3, 4], r), rand(&[2, 4, 5], r)], r, |t, x| t.bmm(x[0], x[1], false))),
        case!(Op, "bmm_transposed", |r| check_op(&[rand(&[2, 3, 4], r), rand(&[2, 5, 4], r)], r, |t, x| {
            t.bmm(x[0], x[1], true)
        })),
        case!(Op, "concat_last", |r| check_op(&[rand(&[2, 3], r), rand(&[2, 4], r)], r, |t, x| t.concat_last(x[0], x[1]))),
        case!(Op, "softmax", |r| check_op(&[rand(&[2, 3, 4], r)], r, |t, x| t.softmax(x[0], 1))),
        case!(Op, "masked_softmax", |r| {
            let mask = random_mask(2, 4, r)?;
            check_op(&[rand(&[2, 2, 4, 4], r)], r, move |t, x| t.masked_softmax(x[0], &mask))
        }),
        case!(Op, "layer_norm", |r| check_op(&[rand(&[3, 5], r), rand(&[5], r), rand(&[5], r)], r, |t, x| {
            t.layer_norm(x[0], x[1], x[2])
        })),
        case!(Op, "sum", |r| check_op(&[rand(&[3, 2], r)], r, |t, x| Ok(t.sum(x[0])))),
        case!(Op, "mean", |r| check_op(&[rand(&[3, 2], r)], r, |t, x| Ok(t.mean(x[0])))),
        case!(Op, "mean_dim1", |r| check_op(&[rand(&[2, 3, 4], r)], r, |t, x| t.mean_dim1(x[0]))),
        case!(Op, "reshape", |r| check_op(&[rand(&[2, 6], r)], r, |t, x| t.reshape(x[0], &[3, 4]))),
        case!(Op, "permute", |r| check_op(&[rand(&[2, 3, 4], r)], r, |t, x| t.permute(x[0], &[2, 0, 1]))),
        case!(Op, "conv2d", |r| check_op(&[rand(&[2, 4, 5, 2], r), rand(&[18, 3], r)], r, |t, x| {
            t.conv2d(x[0], x[1], ConvGeom::same3x3((1, 1)))
        })),
        case!(Op, "conv2d_strided", |r| check_op(&[rand(&[1, 4, 6, 2], r), rand(&[18, 2], r)], r, |t, x| {
            t.conv2d(x[0], x[1], ConvGeom::same3x3((2, 3)))
        })),
        case!(Op, "upsample", |r| check_op(&[rand(&[1, 2, 3, 2], r)], r, |t, x| t.upsample(x[0], (2, 3)))),
        case!(Op, "cross_entropy", |r| {
            let targets: Vec<usize> = (0..4).map(|_| rand::Rng::random_range(r, 0..5)).collect();
            let ignore = [false, true, false, false];
            check_op(&[rand(&[4, 5], r)], r, move |t, x| t.cross_entropy(x[0], &targets, &ignore))
        }),
        case!(Op, "soft_cross_entropy", |r| {
            let targets = distributions(1, 3, 5, r).reshape(&[3, 5])?;
            check_op(&[rand(&[3, 5], r)], r, move |t, x| t.soft_cross_entropy(x[0], &targets, &[false, false, true]))
        }),
    ]
}

fn block_cases() -> Vec<GradCase> {
    vec![
        case!(Block, "linear", |r| {
            let mut s = ParamStore::new();
            let l = Linear::new(&mut s, "l", 4, 3, true, r);
            let x = rand(&[2, 4], r);
            check_block(&s, r, |t| {
                let x = t.constant(x.clone());
                l.forward(t, x)
            })
        }),
        case!(Block, "layer_norm_block", |r| {
            let mut s = ParamStore::new();
            let l = LayerNorm::new(&mut s, "n", 5);
            let x = rand(&[3, 5], r);
            check_block(&s, r, |t| {
                let x = t.constant(x.clone());
                l.forward(t, x)
            })
        }),
        case!(Block, "feed_forward", |r| {
            let mut s = ParamStore::new();
            let l = FeedForward::new(&mut s, "ff", &block_cfg(), r);
            let x = rand(&[2, 3, 8], r);
            check_block(&s, r, |t| {
                let x = t.constant(x.clone());
                l.forward(t, x)
            })
        }),
        case!(Block, "conv2d_block", |r| {
            let mut s = ParamStore::new();
            let l = Conv2d::new(&mut s, "c", 2, 3, ConvGeom::same3x3((2, 2)), r);
            let x = rand(&[1, 4, 4, 2], r);
            check_block(&s, r, |t| {
                let x = t.constant(x.clone());
                l.forward(t, x)
            })
        }),
        case!(Block, "multi_head_attention", |r| {
            let mut s = ParamStore::new();
            let l = MultiHeadAttention::new(&mut s, "a", &block_cfg(), r)?;
            let (q, kv, mask) = (rand(&[2, 4, 8], r), rand(&[2, 4, 8], r), random_mask(2, 4, r)?);
            check_block(&s, r, |t| {
                let q = t.constant(q.clone());
                let kv = t.constant(kv.clone());
                Ok(l.forward(t, q, kv, kv, &mask)?.values)
            })
        }),
        case!(Block, "encoder_layer", |r| {
            let mut s = ParamStore::new();
            let l = TransformerEncoderLayer::new(&mut s, "e", &block_cfg(), r)?;
            let (x, mask) = (rand(&[2, 4, 8], r), random_mask(2, 4, r)?);
            check_block(&s, r, |t| {
                let x = t.constant(x.clone());
                l.forward(t, x, &mask)
            })
        }),
        case!(Block, "bcn_layer", |r| {
            let mut s = ParamStore::new();
            let l = BcnLayer::new(&mut s, "b", &block_cfg(), r)?;
            let (q, kv, mask) = (rand(&[2, 4, 8], r), rand(&[2, 4, 8], r), random_mask(2, 4, r)?);
            check_block(&s, r, |t| {
                let q = t.constant(q.clone());
                let kv = t.constant(kv.clone());
                l.forward(t, q, kv, &mask)
            })
        }),
        case!(Block, "bcn_model", |r| lm_case(LmVariant::Bcn, r)),
        case!(Block, "causal_model", |r| lm_case(LmVariant::Causal, r)),
        case!(Block, "ensemble_model", |r| {
            let cfg = tiny_lm(LmVariant::Causal);
            let mut s = ParamStore::new();
            let lm = EnsembleLm::new(&mut s, "ens", &cfg, r)?;
            let probs = distributions(2, cfg.seq_len(), 5, r);
            check_block(&s, r, |t| {
                let p = t.constant(probs.clone());
                lm.forward(t, p, &[4, 2])
            })
        }),
        case!(Block, "backbone", |r| {
            let cfg = tiny_vision(AttnMode::Pa, SmnVariant::Conv, false);
            let mut s = ParamStore::new();
            let l = Backbone::new(&mut s, "bb", &cfg, r);
            let x = rand(&[1, 16, 24, 1], r);
            check_block(&s, r, |t| {
                let x = t.constant(x.clone());
                l.forward(t, x)
            })
        }),
        case!(Block, "sequence_transformer", |r| smn_case(SmnVariant::Transformer, r)),
        case!(Block, "sequence_conv", |r| smn_case(SmnVariant::Conv, r)),
        case!(Block, "unet", |r| unet_case(false, r)),
        case!(Block, "unet_hfa", |r| unet_case(true, r)),
        case!(Block, "vision_pa", |r| vision_case(AttnMode::Pa, r)),
        case!(Block, "vision_pca", |r| vision_case(AttnMode::Pca, r)),
        case!(Block, "fusion", |r| {
            let mut s = ParamStore::new();
            let l = Fusion::new(&mut s, "f", 8, 5, r);
            let (fv, fl) = (rand(&[2, 4, 8], r), rand(&[2, 4, 8], r));
            check_block(&s, r, |t| {
                let fv = t.constant(fv.clone());
                let fl = t.constant(fl.clone());
                Ok(l.forward(t, fv, fl)?.logits)
            })
        }),
        case!(Block, "full_loss", full_loss_case),
    ]
}

fn lm_case(variant: LmVariant, r: &mut Rng) -> Result<f64> {
    let cfg = tiny_lm(variant);
    let mut s = ParamStore::new();
    let lm = LanguageModel::new(&mut s, "lm", &cfg, r)?;
    let probs = distributions(2, cfg.seq_len(), 5, r);
    check_block(&s, r, |t| {
        let p = t.constant(probs.clone());
        Ok(lm.forward(t, p, &[4, 2])?.logits)
    })
}

fn smn_case(smn: SmnVariant, r: &mut Rng) -> Result<f64> {
    let cfg = tiny_vision(AttnMode::Pa, smn, false);
    let mut s = ParamStore::new();
    let l = SequenceModel::new(&mut s, "smn", &cfg, r)?;
    let x = rand(&[1, 4, 6, 8], r);
    check_block(&s, r, |t| {
        let x = t.constant(x.clone());
        l.forward(t, x)
    })
}

fn unet_case(hfa: bool, r: &mut Rng) -> Result<f64> {
    let cfg = tiny_vision(AttnMode::Pa, SmnVariant::Conv, hfa);
    let mut s = ParamStore::new();
    let l = UNet::new(&mut s, "u", &cfg, r)?;
    let x = rand(&[1, 4, 6, 8], r);
    check_block(&s, r, |t| {
        let x = t.constant(x.clone());
        l.forward(t, x)
    })
}

fn vision_case(mode: AttnMode, r: &mut Rng) -> Result<f64> {
    let cfg = tiny_vision(mode, SmnVariant::Transformer, true);
    let mut s = ParamStore::new();
    let vm = VisionModel::new(&mut s, "vm", &cfg, r)?;
    let x = rand(&[1, 16, 24, 1], r);
    check_block(&s, r, |t| {
        let x = t.constant(x.clone());
        let out = vm.forward(t, x)?;
        let logits = t.concat_last(out.last_logits(), out.logits[0])?;
        t.concat_last(logits, out.last_features())
    })
}

/// Total training loss of a whole pipeline over a three-symbol charset. The
/// detached language-model inputs are replayed so that finite differences
/// see the same function the recorded gradient describes.
fn full_loss_case(r: &mut Rng) -> Result<f64> {
    let mut cfg = PipelineConfig {
        vision: tiny_vision(AttnMode::Pca, SmnVariant::Conv, false),
        lm: tiny_lm(LmVariant::Bcn),
    };
    cfg.lm.layers = 1;
    let pipeline = Pipeline::new(&cfg, rand::Rng::random(r))?;
    let x = rand(&[2, 16, 24, 1], r);
    let texts = ["abc".to_string(), "ca".to_string()];
    let targets = LossTargets::from_texts(pipeline.charset(), &texts, pipeline.seq_len())?;
    let seed = rand::Rng::random(r);
    let store = jitter(&pipeline.store, r);
    let inputs: Vec<Tensor> = {
        let mut t = Tape::with_params(&store);
        let x = t.constant(x.clone());
        let out = pipeline.forward(&mut t, x, 2)?;
        out.steps.iter().map(|s| t.value(s.lm_input).clone()).collect()
    };
    let report = check_param_grads(
        &store,
        |t| {
            let x = t.constant(x.clone());
            let out = pipeline.forward_with_inputs(t, x, &inputs)?;
            Ok(total_loss(t, &out, &targets, 1.0, 1.0)?.total)
        },
        STEP,
        COORDS_PER_TENSOR,
        seed,
    )?;
    Ok(report.max_rel_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_names_are_unique() {
        let mut names: Vec<_> = cases().iter().map(|c| c.name).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut r = SeedTree::new(0).rng("wrong");
        let err = check_op(&[rand(&[4], &mut r)], &mut r, |t, x| {
            let y = t.stop_gradient(x[0]);
            Ok(t.mul(y, x[0])?)
        })
        .unwrap();
        assert!(err > TOLERANCE);
    }
}
