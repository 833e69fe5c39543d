use crate::error::{Error, Result};
use crate::nn::{BlockConfig, Linear};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

/// Result of an attention call: projected values and the per-head maps.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[B, t_q, d]`
    pub values: Var,
    /// `[B, heads, t_q, t_k]`, row-stochastic.
    pub weights: Var,
}

/// Multi-head scaled dot-product attention with an additive mask.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    cfg: BlockConfig,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            wk: Linear::new(store, &format!("{name}.k"), d, d, true, rng),
            wv: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            wo: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            cfg: *cfg,
        })
    }

    /// `[B, t, d] -> [B * heads, t, d_head]`
    fn split_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, t, h) = (s[0], s[1], self.cfg.heads);
        let dh = self.cfg.d / h;
        let x = tape.reshape(x, &[b, t, h, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * h, t, dh])
    }

    /// `q: [B, t_q, d]`, `k, v: [B, t_k, d]`, `mask: [B, t_q, t_k]`.
    pub fn forward(&self, tape: &mut Tape, q: Var, k: Var, v: Var, mask: &Tensor) -> Result<AttentionOutput> {
        let sq = tape.shape(q).to_vec();
        let sk = tape.shape(k).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sq[2] != self.cfg.d || sk[2] != self.cfg.d || sq[0] != sk[0] {
            return Err(Error::shape("multi_head_attention", &sq, &sk));
        }
        if tape.shape(v) != sk.as_slice() {
            return Err(Error::shape("multi_head_attention", &sk, tape.shape(v)));
        }
        let (b, tq, tk, h) = (sq[0], sq[1], sk[1], self.cfg.heads);
        let dh = self.cfg.d / h;
        if mask.shape() != [b, tq, tk] {
            return Err(Error::shape("attention mask", &[b, tq, tk], mask.shape()));
        }
        let qp = self.wq.forward(tape, q)?;
        let kp = self.wk.forward(tape, k)?;
        let vp = self.wv.forward(tape, v)?;
        let qh = self.split_heads(tape, qp)?;
        let kh = self.split_heads(tape, kp)?;
        let vh = self.split_heads(tape, vp)?;
        let scores = tape.bmm(qh, kh, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = tape.reshape(scores, &[b, h, tq, tk])?;
        let weights = tape.masked_softmax(scores, mask)?;
        let attn = tape.dropout(weights, self.cfg.dropout);
        let attn = tape.reshape(attn, &[b * h, tq, tk])?;
        let ctx = tape.bmm(attn, vh, false)?;
        let ctx = tape.reshape(ctx, &[b, h, tq, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, tq, self.cfg.d])?;
        let values = self.wo.forward(tape, ctx)?;
        Ok(AttentionOutput { values, weights })
    }
}
