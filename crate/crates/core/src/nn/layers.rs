use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ConvGeom, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

/// Width, heads and feed-forward shape shared by attention blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub dropout: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            d: 128,
            heads: 8,
            ffn_multiplier: 4,
            dropout: 0.1,
        }
    }
}

impl BlockConfig {
    pub fn new(d: usize, heads: usize) -> Self {
        Self {
            d,
            heads,
            ..Self::default()
        }
    }

    pub fn without_dropout(mut self) -> Self {
        self.dropout = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let w = store.register(format!("{name}.w"), Tensor::glorot(fan_in, fan_out, rng));
        let b = bias.then(|| store.register(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.affine(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.register(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain), tape.param(self.bias));
        tape.layer_norm(x, g, b)
    }
}

/// Position-wise `Linear -> GELU -> Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    dropout: f64,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut Rng) -> Self {
        let hidden = cfg.d * cfg.ffn_multiplier;
        Self {
            up: Linear::new(store, &format!("{name}.up"), cfg.d, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, cfg.d, true, rng),
            dropout: cfg.dropout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h);
        let h = tape.dropout(h, self.dropout);
        self.down.forward(tape, h)
    }
}

/// Convolution with bias over channel-last feature maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeom,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = geom.kernel.0 * geom.kernel.1 * c_in;
        let fan_out = geom.kernel.0 * geom.kernel.1 * c_out;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            w: store.register(format!("{name}.w"), Tensor::uniform(&[fan_in, c_out], bound, rng)),
            b: store.register(format!("{name}.b"), Tensor::zeros(&[c_out])),
            geom,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        let y = tape.conv2d(x, w, self.geom)?;
        tape.add_broadcast(y, b)
    }
}
