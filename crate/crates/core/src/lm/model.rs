use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::prob::{argmax_rows, check_normalized};
use crate::lm::Charset;
use crate::nn::{positional_encoding, AttentionMask, BcnLayer, BlockConfig, Linear, TransformerEncoderLayer};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmVariant {
    /// Cross-attention stack with the cloze mask.
    Bcn,
    /// Right-shifted self-attention stack with a causal mask.
    Causal,
}

/// What the model sees of its input distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmInput {
    Soft,
    Argmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub layers: usize,
    pub block: BlockConfig,
    pub t_max: usize,
    pub variant: LmVariant,
    pub input: LmInput,
    pub symbols: String,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            block: BlockConfig::default(),
            t_max: 25,
            variant: LmVariant::Bcn,
            input: LmInput::Soft,
            symbols: crate::lm::DEFAULT_SYMBOLS.into(),
        }
    }
}

impl LmConfig {
    /// Output positions: `t_max` symbols plus the end marker.
    pub fn seq_len(&self) -> usize {
        self.t_max + 1
    }

    pub fn charset(&self) -> Result<Charset> {
        Charset::from_symbols(&self.symbols)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("language model needs at least one layer".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        self.block.validate()?;
        if self.block.d % 2 != 0 {
            return Err(Error::Config(format!("model width {} must be even", self.block.d)));
        }
        self.charset().map(|_| ())
    }

    /// Trainable scalar count, from the architecture alone.
    pub fn param_count(&self) -> Result<usize> {
        let d = self.block.d;
        let f = self.block.ffn_multiplier * d;
        let c = self.charset()?.num_classes();
        let attention = 4 * (d * d + d);
        let norms = 2 * (2 * d);
        let ffn = (d * f + f) + (f * d + d);
        let layer = attention + norms + ffn;
        Ok(self.layers * layer + c * d + d * c + c)
    }
}

/// Output of a language-model pass.
#[derive(Clone, Copy, Debug)]
pub struct LmOutput {
    /// `[B, T, d]`
    pub features: Var,
    /// `[B, T, c]`
    pub logits: Var,
}

#[derive(Clone, Debug)]
enum Stack {
    Bcn(Vec<BcnLayer>),
    Causal(Vec<TransformerEncoderLayer>),
}

/// Character language model over probability-vector inputs.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    cfg: LmConfig,
    charset: Charset,
    prefix: String,
    /// Input projection `[c, d]`, shared by keys and values.
    pub w_l: ParamId,
    stack: Stack,
    pub cls: Linear,
}

impl LanguageModel {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &LmConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let charset = cfg.charset()?;
        let (c, d) = (charset.num_classes(), cfg.block.d);
        let w_l = store.register(format!("{prefix}.w_l"), Tensor::glorot(c, d, rng));
        let stack = match cfg.variant {
            LmVariant::Bcn => Stack::Bcn(
                (0..cfg.layers)
                    .map(|i| BcnLayer::new(store, &format!("{prefix}.layer{i}"), &cfg.block, rng))
                    .collect::<Result<_>>()?,
            ),
            LmVariant::Causal => Stack::Causal(
                (0..cfg.layers)
                    .map(|i| TransformerEncoderLayer::new(store, &format!("{prefix}.layer{i}"), &cfg.block, rng))
                    .collect::<Result<_>>()?,
            ),
        };
        let cls = Linear::new(store, &format!("{prefix}.cls"), d, c, true, rng);
        Ok(Self {
            cfg: cfg.clone(),
            charset,
            prefix: prefix.into(),
            w_l,
            stack,
            cls,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn charset(&self) -> &Charset {
        &self.charset
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// `probs: [B, T, c]` row-stochastic; `lengths[b]` counts the positions
    /// of instance `b` that carry text or the end marker. Gradients never
    /// flow back into `probs`.
    pub fn forward(&self, tape: &mut Tape, probs: Var, lengths: &[usize]) -> Result<LmOutput> {
        let t = self.cfg.seq_len();
        let c = self.charset.num_classes();
        let shape = tape.shape(probs).to_vec();
        if shape.len() != 3 || shape[1] != t || shape[2] != c || shape[0] != lengths.len() {
            return Err(Error::shape("lm_forward", &shape, &[lengths.len(), t, c]));
        }
        check_normalized(tape.value(probs))?;
        let b = shape[0];
        let blocked = tape.stop_gradient(probs);
        let input = match self.cfg.input {
            LmInput::Soft => blocked,
            LmInput::Argmax => {
                let one_hot = one_hot_argmax(tape.value(blocked));
                tape.constant(one_hot)
            }
        };
        let pe = positional_encoding(t, self.cfg.block.d)?;
        let w_l = tape.param(self.w_l);
        let features = match &self.stack {
            Stack::Bcn(layers) => {
                let kv = tape.matmul(input, w_l)?;
                let pe_k = tape.constant(pe.clone());
                let kv = tape.add_broadcast(kv, pe_k)?;
                let mask = self.cloze_mask(lengths)?;
                let mut q = tape.constant(repeat_batch(&pe, b));
                for layer in layers {
                    q = layer.forward(tape, q, kv, &mask)?;
                }
                q
            }
            Stack::Causal(layers) => {
                let shifted = shift_right(tape.value(input), self.charset.pad());
                let shifted = tape.constant(shifted);
                let x = tape.matmul(shifted, w_l)?;
                let pe = tape.constant(pe);
                let mut x = tape.add_broadcast(x, pe)?;
                let mask = self.causal_mask(lengths)?;
                for layer in layers {
                    x = layer.forward(tape, x, &mask)?;
                }
                x
            }
        };
        let logits = self.cls.forward(tape, features)?;
        Ok(LmOutput { features, logits })
    }

    fn cloze_mask(&self, lengths: &[usize]) -> Result<Tensor> {
        let t = self.cfg.seq_len();
        let diag = AttentionMask::diagonal(t)?;
        let masks = lengths
            .iter()
            .map(|&l| {
                if l < 2 {
                    return Err(Error::ClozeLengthOne);
                }
                diag.combine(&AttentionMask::padding(l, t)?)
            })
            .collect::<Result<Vec<_>>>()?;
        AttentionMask::stack(&masks)
    }

    fn causal_mask(&self, lengths: &[usize]) -> Result<Tensor> {
        let t = self.cfg.seq_len();
        let causal = AttentionMask::causal(t);
        let masks = lengths
            .iter()
            .map(|&l| {
                if l == 0 || l > t {
                    return Err(Error::Config(format!("length {l} outside [1, {t}]")));
                }
                causal.combine(&AttentionMask::padding((l + 1).min(t), t)?)
            })
            .collect::<Result<Vec<_>>>()?;
        AttentionMask::stack(&masks)
    }
}

/// `[T, d] -> [B, T, d]`
pub(crate) fn repeat_batch(x: &Tensor, b: usize) -> Tensor {
    let mut shape = vec![b];
    shape.extend_from_slice(x.shape());
    let data = x.data().repeat(b);
    Tensor::new(shape, data).expect("repeat keeps sizes consistent")
}

/// Moves every position one step later and fills position 0 with the
/// one-hot start symbol.
fn shift_right(probs: &Tensor, start: usize) -> Tensor {
    let s = probs.shape();
    let (b, t, c) = (s[0], s[1], s[2]);
    let src = probs.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        out[bi * t * c + start] = 1.0;
        for p in 1..t {
            let (dst, from) = ((bi * t + p) * c, (bi * t + p - 1) * c);
            out[dst..dst + c].copy_from_slice(&src[from..from + c]);
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

fn one_hot_argmax(probs: &Tensor) -> Tensor {
    let c = probs.last_dim();
    let mut out = Tensor::zeros(probs.shape());
    for (r, k) in argmax_rows(probs).into_iter().enumerate() {
        out.data_mut()[r * c + k] = 1.0;
    }
    out
}

/// Two causal models reading the text in opposite directions. Logits are
/// the average of both directions after re-aligning the reversed one.
#[derive(Clone, Debug)]
pub struct EnsembleLm {
    pub forward_lm: LanguageModel,
    pub backward_lm: LanguageModel,
}

impl EnsembleLm {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &LmConfig, rng: &mut Rng) -> Result<Self> {
        let cfg = LmConfig {
            variant: LmVariant::Causal,
            ..cfg.clone()
        };
        Ok(Self {
            forward_lm: LanguageModel::new(store, &format!("{prefix}.fwd"), &cfg, rng)?,
            backward_lm: LanguageModel::new(store, &format!("{prefix}.bwd"), &cfg, rng)?,
        })
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(2 * self.forward_lm.config().param_count()?)
    }

    pub fn forward(&self, tape: &mut Tape, probs: Var, lengths: &[usize]) -> Result<Var> {
        let fwd = self.forward_lm.forward(tape, probs, lengths)?;
        let reversed = reverse_text(tape.value(probs), lengths);
        let reversed = tape.constant(reversed);
        let bwd = self.backward_lm.forward(tape, reversed, lengths)?;
        let perm = reversal_matrix(lengths, tape.shape(probs)[1]);
        let bwd_logits = permute_positions(tape, bwd.logits, &perm)?;
        let sum = tape.add(fwd.logits, bwd_logits)?;
        Ok(tape.scale(sum, 0.5))
    }
}

/// Reverses the first `len - 1` positions of every instance, leaving the end
/// marker slot and padding in place.
fn reverse_text(x: &Tensor, lengths: &[usize]) -> Tensor {
    let s = x.shape();
    let (t, c) = (s[1], s[2]);
    let mut out = x.clone();
    out.zero_grad();
    for (b, &len) in lengths.iter().enumerate() {
        let n = len.saturating_sub(1).min(t);
        for p in 0..n {
            let (dst, src) = ((b * t + p) * c, (b * t + n - 1 - p) * c);
            out.data_mut()[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    out
}

/// Per-instance `[T, T]` permutation matrices implementing [`reverse_text`].
fn reversal_matrix(lengths: &[usize], t: usize) -> Tensor {
    let b = lengths.len();
    let mut m = Tensor::zeros(&[b, t, t]);
    for (bi, &len) in lengths.iter().enumerate() {
        let n = len.saturating_sub(1).min(t);
        for p in 0..t {
            let src = if p < n { n - 1 - p } else { p };
            m.data_mut()[(bi * t + p) * t + src] = 1.0;
        }
    }
    m
}

fn permute_positions(tape: &mut Tape, x: Var, perm: &Tensor) -> Result<Var> {
    let p = tape.constant(perm.clone());
    tape.bmm(p, x, false)
}
