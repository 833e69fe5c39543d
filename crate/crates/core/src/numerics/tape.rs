//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied during a forward pass in
//! execution order. [`Tape::backward`] replays the recorded rules in reverse
//! and accumulates gradients into every node reachable from a
//! gradient-requiring leaf. A tape can be consumed by `backward` exactly once.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamGrads, ParamId, ParamStore, Tensor};

/// Additive sentinel standing in for minus infinity in attention masks.
pub const MASK_NEG: f64 = -1e30;
/// Anything at or below this value is treated as masked by the softmax ops.
pub(crate) const MASK_THRESHOLD: f64 = -1e29;
const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeom {
    pub fn same3x3(stride: (usize, usize)) -> Self {
        Self {
            kernel: (3, 3),
            stride,
            pad: (1, 1),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.pad;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return None;
        }
        Some((
            (h + 2 * ph - kh) / self.stride.0 + 1,
            (w + 2 * pw - kw) / self.stride.1 + 1,
        ))
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Concat(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    MeanDim1(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Upsample { x: Var, factor: (usize, usize) },
    CrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
        include: Vec<bool>,
        count: usize,
    },
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The computation record for one forward/backward pass.
pub struct Tape<'p> {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
            consumed: false,
            dropout_rng: None,
        }
    }

    /// A tape that can bind parameters from `params`.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Enables dropout for this tape, drawing masks from a generator seeded
    /// with `seed`. Without this call every dropout op is the identity.
    pub fn enable_dropout(&mut self, seed: u64) {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the consumed loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter from the attached store. Repeated calls return the
    /// same handle so gradients accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("tape has no parameter store attached");
        let mut value = store.get(id).clone();
        value.zero_grad();
        let v = self.push(value, Op::Leaf, true);
        self.param_vars.insert(id, v);
        v
    }

    /// Gradients for every bound parameter that was reached by `backward`.
    pub fn param_grads(&self) -> ParamGrads {
        let mut entries: Vec<_> = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g.to_vec())))
            .collect();
        entries.sort_by_key(|(id, _)| *id);
        ParamGrads { entries }
    }

    // ---- elementwise ------------------------------------------------------

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `x + y` where the shape of `y` is a suffix of the shape of `x`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(Error::shape("add_broadcast", sx, sy));
        }
        let ty = self.value(y).data();
        let n = ty.len();
        let mut out = self.value(x).clone();
        out.zero_grad();
        for chunk in out.data_mut().chunks_mut(n) {
            chunk.iter_mut().zip(ty).for_each(|(a, b)| *a += b);
        }
        let ng = self.needs(x) || self.needs(y);
        Ok(self.push(out, Op::AddBroadcast(x, y), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.map(x, |v| v * s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(0.0));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| gelu(v).0);
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Identity on values; blocks every gradient flowing back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.zero_grad();
        self.push(out, Op::Leaf, false)
    }

    /// Inverted dropout with keep-probability `1 - p`. Identity when the tape
    /// has no dropout generator or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut().filter(|_| p > 0.0) else {
            return x;
        };
        let keep = 1.0 - p;
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    // ---- linear algebra ---------------------------------------------------

    /// `x[..., k] @ w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || *sx.last().unwrap() != sw[0] {
            return Err(Error::shape("matmul", &sx, &sw));
        }
        let (k, n) = (sw[0], sw[1]);
        let rows = self.value(x).numel() / k;
        let mut out = vec![0.0; rows * n];
        gemm(
            rows,
            k,
            n,
            self.value(x).data(),
            (k, 1),
            self.value(w).data(),
            (n, 1),
            &mut out,
            0.0,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(x, w), ng))
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when
    /// `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let sb_strides = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..],
                (k, 1),
                &db[i * k * n..],
                sb_strides,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            ng,
        ))
    }

    /// Concatenates two tensors along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let (na, nb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for r in 0..ta.rows() {
            out.extend_from_slice(ta.row(r));
            out.extend_from_slice(tb.row(r));
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = na + nb;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(a, b), ng))
    }

    // ---- normalization ----------------------------------------------------

    /// Numerically stable softmax along `axis`. Entries at or below the mask
    /// sentinel (including `-inf`) receive exactly zero weight.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("softmax axis {axis} out of range"),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                softmax_strided(src, &mut out, n, idx)?;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, ng))
    }

    /// Softmax over the last axis of `scores: [B, H, tq, tk]` after adding
    /// an additive mask `[B, tq, tk]` shared across the `H` axis.
    pub fn masked_softmax(&mut self, scores: Var, mask: &Tensor) -> Result<Var> {
        let shape = self.shape(scores).to_vec();
        let ms = mask.shape();
        if shape.len() != 4 || ms.len() != 3 || ms != [shape[0], shape[2], shape[3]] {
            return Err(Error::shape("masked_softmax", &shape, ms));
        }
        let (b, h, tq, tk) = (shape[0], shape[1], shape[2], shape[3]);
        let src = self.value(scores).data();
        let md = mask.data();
        let mut out = vec![0.0; src.len()];
        let mut row = vec![0.0; tk];
        for bi in 0..b {
            for hi in 0..h {
                for q in 0..tq {
                    let base = ((bi * h + hi) * tq + q) * tk;
                    let mbase = (bi * tq + q) * tk;
                    for j in 0..tk {
                        let m = md[mbase + j];
                        row[j] = if m <= MASK_THRESHOLD {
                            MASK_NEG
                        } else {
                            src[base + j] + m
                        };
                    }
                    softmax_strided(&row, &mut out[base..base + tk], tk, |j| j)?;
                }
            }
        }
        let ng = self.needs(scores);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaskedSoftmax(scores), ng))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if d < 2 {
            return Err(Error::InvalidShape {
                shape,
                reason: "layer norm needs a last axis of length >= 2".into(),
            });
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let tx = self.value(x);
        let rows = tx.rows();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    // ---- reductions and reshaping ----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over the middle axis: `[A, N, C] -> [A, C]`.
    pub fn mean_dim1(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::InvalidShape {
                shape,
                reason: "mean_dim1 expects rank 3".into(),
            });
        }
        let (a, n, c) = (shape[0], shape[1], shape[2]);
        let src = self.value(x).data();
        let mut out = vec![0.0; a * c];
        for ai in 0..a {
            for ni in 0..n {
                let row = &src[(ai * n + ni) * c..(ai * n + ni + 1) * c];
                out[ai * c..(ai + 1) * c]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(o, v)| *o += v);
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(vec![a, c], out)?, Op::MeanDim1(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.zero_grad();
        let out = t.reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(x).data(), &shape, perm);
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    // ---- convolution ------------------------------------------------------

    /// 2-D convolution over channel-last input `[B, H, W, C]` with weights
    /// laid out as `[kh * kw * C, O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 2 || sw[0] != geom.kernel.0 * geom.kernel.1 * sx[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (b, h, wd, c) = (sx[0], sx[1], sx[2], sx[3]);
        let (ho, wo) = geom
            .output_hw(h, wd)
            .ok_or_else(|| Error::shape("conv2d", &sx, &[geom.kernel.0, geom.kernel.1]))?;
        let o = sw[1];
        let kdim = sw[0];
        let cols = im2col(self.value(x).data(), (b, h, wd, c), geom, (ho, wo));
        let rows = b * ho * wo;
        let mut out = vec![0.0; rows * o];
        gemm(rows, kdim, o, &cols, (kdim, 1), self.value(w).data(), (o, 1), &mut out, 0.0);
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(
            Tensor::new(vec![b, ho, wo, o], out)?,
            Op::Conv2d { x, w, geom },
            ng,
        ))
    }

    /// Nearest-neighbour upsampling of `[B, H, W, C]` by integer factors.
    pub fn upsample(&mut self, x: Var, factor: (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor.0 == 0 || factor.1 == 0 {
            return Err(Error::shape("upsample", &s, &[factor.0, factor.1]));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (fh, fw) = factor;
        let (ho, wo) = (h * fh, w * fw);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * ho * wo * c];
        for bi in 0..b {
            for y in 0..ho {
                for xx in 0..wo {
                    let si = ((bi * h + y / fh) * w + xx / fw) * c;
                    let di = ((bi * ho + y) * wo + xx) * c;
                    out[di..di + c].copy_from_slice(&src[si..si + c]);
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![b, ho, wo, c], out)?,
            Op::Upsample { x, factor },
            ng,
        ))
    }

    // ---- losses -----------------------------------------------------------

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// over rows whose `ignore` flag is false. `logits` is viewed as
    /// `[rows, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: &[bool]) -> Result<Var> {
        let c = self.value(logits).last_dim();
        let rows = self.value(logits).rows();
        if targets.len() != rows || ignore.len() != rows {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let mut dist = vec![0.0; rows * c];
        for (r, (&t, &ig)) in targets.iter().zip(ignore).enumerate() {
            if ig {
                continue;
            }
            if t >= c {
                return Err(Error::TargetOutOfRange { target: t, classes: c });
            }
            dist[r * c + t] = 1.0;
        }
        self.soft_cross_entropy_raw(logits, dist, ignore)
    }

    /// Cross-entropy against target distributions `[rows, classes]`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor, ignore: &[bool]) -> Result<Var> {
        if targets.numel() != self.value(logits).numel() {
            return Err(Error::shape("soft_cross_entropy", self.shape(logits), targets.shape()));
        }
        self.soft_cross_entropy_raw(logits, targets.data().to_vec(), ignore)
    }

    fn soft_cross_entropy_raw(&mut self, logits: Var, targets: Vec<f64>, ignore: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, c) = (tl.rows(), tl.last_dim());
        if ignore.len() != rows {
            return Err(Error::shape("cross_entropy", tl.shape(), &[ignore.len()]));
        }
        let include: Vec<bool> = ignore.iter().map(|&i| !i).collect();
        let count = include.iter().filter(|&&i| i).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let mut probs = vec![0.0; rows * c];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            if include[r] {
                for j in 0..c {
                    let t = targets[r * c + j];
                    if t != 0.0 {
                        loss -= t * (row[j] - lse);
                    }
                }
            }
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss / count as f64),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                include,
                count,
            },
            ng,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Back-propagates from a scalar `loss`. A tape may be consumed only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::RecordConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * va[k];
                    }
                });
            }
            Op::AddBroadcast(x, y) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let n = self.value(*y).numel();
                acc(*y, &mut |gy| {
                    for chunk in g.chunks(n) {
                        add_into(gy, chunk);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b)
            }),
            Op::MatMul(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.numel() / k;
                acc(*x, &mut |gx| gemm(rows, n, k, g, (n, 1), tw.data(), (1, n), gx, 1.0));
                acc(*w, &mut |gw| gemm(k, rows, n, tx.data(), (1, k), g, (n, 1), gw, 1.0));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = if *trans_b { tb.shape()[1] } else { tb.shape()[2] };
                acc(*a, &mut |ga| {
                    // ga = g @ b^T   (b: [k, n]) or g @ b  (b stored [n, k])
                    let bs = if *trans_b { (k, 1) } else { (1, n) };
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            (n, 1),
                            &tb.data()[i * k * n..],
                            bs,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..batch {
                        let ga_slice = &ta.data()[i * m * k..];
                        let gi = &g[i * m * n..];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // gb[n, k] = g^T @ a
                            gemm(n, m, k, gi, (1, n), ga_slice, (k, 1), dst, 1.0);
                        } else {
                            // gb[k, n] = a^T @ g
                            gemm(k, m, n, ga_slice, (1, k), gi, (n, 1), dst, 1.0);
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).last_dim();
                let nb = self.value(*b).last_dim();
                acc(*a, &mut |ga| {
                    for (r, chunk) in ga.chunks_mut(na).enumerate() {
                        add_into(chunk, &g[r * (na + nb)..r * (na + nb) + na]);
                    }
                });
                acc(*b, &mut |gb| {
                    for (r, chunk) in gb.chunks_mut(nb).enumerate() {
                        add_into(chunk, &g[r * (na + nb) + na..(r + 1) * (na + nb)]);
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for k in 0..g.len() {
                        if vx[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * gelu(vx[k]).1;
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * mask[k];
                }
            }),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let n = node.value.last_dim();
                acc(*x, &mut |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                acc(*x, &mut |gx| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gh = gr[j] * gv[j];
                            m1 += gh;
                            m2 += gh * xr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rs * (gr[j] * gv[j] - m1 - xr[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::MeanDim1(x) => {
                let s = self.shape(*x);
                let (a, n, c) = (s[0], s[1], s[2]);
                acc(*x, &mut |gx| {
                    for ai in 0..a {
                        for ni in 0..n {
                            let dst = &mut gx[(ai * n + ni) * c..(ai * n + ni + 1) * c];
                            for j in 0..c {
                                dst[j] += g[ai * c + j] / n as f64;
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inv);
                acc(*x, &mut |gx| add_into(gx, &back));
            }
            Op::Conv2d { x, w, geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let s = tx.shape();
                let dims = (s[0], s[1], s[2], s[3]);
                let os = node.value.shape();
                let (ho, wo, o) = (os[1], os[2], os[3]);
                let rows = dims.0 * ho * wo;
                let kdim = tw.shape()[0];
                if self.needs(*w) {
                    let cols = im2col(tx.data(), dims, *geom, (ho, wo));
                    acc(*w, &mut |gw| gemm(kdim, rows, o, &cols, (1, kdim), g, (o, 1), gw, 1.0));
                }
                acc(*x, &mut |gx| {
                    let mut gcols = vec![0.0; rows * kdim];
                    gemm(rows, o, kdim, g, (o, 1), tw.data(), (1, o), &mut gcols, 0.0);
                    col2im(&gcols, gx, dims, *geom, (ho, wo));
                });
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h * factor.0, w * factor.1);
                acc(*x, &mut |gx| {
                    for bi in 0..b {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let di = ((bi * h + y / factor.0) * w + xx / factor.1) * c;
                                let si = ((bi * ho + y) * wo + xx) * c;
                                add_into(&mut gx[di..di + c], &g[si..si + c]);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                include,
                count,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |gl| {
                    for (r, &inc) in include.iter().enumerate() {
                        if !inc {
                            continue;
                        }
                        let mass: f64 = targets[r * c..(r + 1) * c].iter().sum();
                        for j in 0..c {
                            gl[r * c + j] += scale * (mass * probs[r * c + j] - targets[r * c + j]);
                        }
                    }
                });
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_strided(src: &[f64], out: &mut [f64], n: usize, idx: impl Fn(usize) -> usize) -> Result<()> {
    let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
    if max <= MASK_THRESHOLD {
        return Err(Error::FullyMaskedRow);
    }
    let mut total = 0.0;
    for j in 0..n {
        let v = src[idx(j)];
        let e = if v <= MASK_THRESHOLD { 0.0 } else { (v - max).exp() };
        out[idx(j)] = e;
        total += e;
    }
    for j in 0..n {
        out[idx(j)] /= total;
    }
    Ok(())
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    loop {
        // innermost run
        let s = strides[last];
        for k in 0..out_shape[last] {
            out.push(src[offset + k * s]);
        }
        // advance odometer above the innermost axis
        let mut axis = last;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            counter[axis] += 1;
            offset += strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
}

fn im2col(
    src: &[f64],
    (b, h, w, c): (usize, usize, usize, usize),
    geom: ConvGeom,
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    let (kh, kw) = geom.kernel;
    let kdim = kh * kw * c;
    let mut cols = vec![0.0; b * ho * wo * kdim];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * kdim;
                for ky in 0..kh {
                    let iy = (oy * geom.stride.0 + ky) as isize - geom.pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * geom.stride.1 + kx) as isize - geom.pad.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let si = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let di = row + (ky * kw + kx) * c;
                        cols[di..di + c].copy_from_slice(&src[si..si + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &[f64],
    dst: &mut [f64],
    (b, h, w, c): (usize, usize, usize, usize),
    geom: ConvGeom,
    (ho, wo): (usize, usize),
) {
    let (kh, kw) = geom.kernel;
    let kdim = kh * kw * c;
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * kdim;
                for ky in 0..kh {
                    let iy = (oy * geom.stride.0 + ky) as isize - geom.pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * geom.stride.1 + kx) as isize - geom.pad.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let di = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let si = row + (ky * kw + kx) * c;
                        add_into(&mut dst[di..di + c], &cols[si..si + c]);
                    }
                }
            }
        }
    }
}

/// `c = a @ b + beta * c` for row-major `c` of shape `[m, n]`. Strides are
/// `(row, col)` pairs so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the asserts above bound every index touched by dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let out = permute_data(t.data(), &[2, 3, 4], &[2, 0, 1]);
        // out[k][i][j] = in[i][j][k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(out[(k * 2 + i) * 3 + j], t.data()[(i * 3 + j) * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3], 2.0));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::RecordConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3], 2.0));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 3, 4, 2], |i| i as f64));
        // 3x3 kernel selecting the centre tap, 2 -> 2 channels
        let mut w = Tensor::zeros(&[18, 2]);
        w.data_mut()[(4 * 2) * 2] = 1.0;
        w.data_mut()[(4 * 2 + 1) * 2 + 1] = 1.0;
        let w = tape.constant(w);
        let y = tape.conv2d(x, w, ConvGeom::same3x3((1, 1))).unwrap();
        assert_eq!(tape.value(y), &Tensor::from_fn(&[1, 3, 4, 2], |i| i as f64));
    }
}
