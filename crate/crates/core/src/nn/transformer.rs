use crate::error::Result;
use crate::nn::{AttentionOutput, BlockConfig, FeedForward, LayerNorm, MultiHeadAttention};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

/// Post-norm self-attention encoder layer:
/// `x = LN(x + SelfAttn(x)); x = LN(x + FFN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerEncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    dropout: f64,
}

impl TransformerEncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d),
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mask: &Tensor) -> Result<Var> {
        let AttentionOutput { values, .. } = self.attn.forward(tape, x, x, x, mask)?;
        let values = tape.dropout(values, self.dropout);
        let h = tape.add(x, values)?;
        let h = self.norm1.forward(tape, h)?;
        let f = self.ffn.forward(tape, h)?;
        let f = tape.dropout(f, self.dropout);
        let out = tape.add(h, f)?;
        self.norm2.forward(tape, out)
    }
}

/// Cloze layer: cross-attention from queries to character vectors, with
/// no self-attention, followed by the feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct BcnLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    dropout: f64,
}

impl BcnLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d),
            dropout: cfg.dropout,
        })
    }

    /// `q: [B, t, d]` queries, `kv: [B, t, d]` character vectors, `mask`
    /// must hide each position from its own key.
    pub fn forward(&self, tape: &mut Tape, q: Var, kv: Var, mask: &Tensor) -> Result<Var> {
        self.forward_with_weights(tape, q, kv, mask).map(|(out, _)| out)
    }

    pub fn forward_with_weights(&self, tape: &mut Tape, q: Var, kv: Var, mask: &Tensor) -> Result<(Var, Var)> {
        let AttentionOutput { values, weights } = self.attn.forward(tape, q, kv, kv, mask)?;
        let values = tape.dropout(values, self.dropout);
        let h = tape.add(q, values)?;
        let h = self.norm1.forward(tape, h)?;
        let f = self.ffn.forward(tape, h)?;
        let f = tape.dropout(f, self.dropout);
        let out = tape.add(h, f)?;
        Ok((self.norm2.forward(tape, out)?, weights))
    }
}
