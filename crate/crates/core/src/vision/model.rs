use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{repeat_batch, Charset};
use crate::nn::{
    positional_encoding, positional_encoding_2d, AttentionMask, BlockConfig, Conv2d, LayerNorm, Linear,
    TransformerEncoderLayer,
};
use crate::numerics::{ConvGeom, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::vision::render::{CELL_H, CELL_W};

/// Longest flattened sequence the transformer sequence model accepts.
pub const SMN_MAX_POSITIONS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmnVariant {
    Transformer,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnMode {
    /// Queries are positional encodings only.
    Pa,
    /// Queries add iteratively refined content vectors.
    Pca,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub strides: Vec<(usize, usize)>,
    pub hfa: bool,
    pub hfa_layers: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            strides: vec![(2, 2), (2, 2), (1, 2), (1, 2)],
            hfa: false,
            hfa_layers: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttnConfig {
    pub mode: AttnMode,
    pub iters: usize,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            mode: AttnMode::Pa,
            iters: 3,
        }
    }
}

impl AttnConfig {
    pub fn effective_iters(&self) -> usize {
        match self.mode {
            AttnMode::Pa => 1,
            AttnMode::Pca => self.iters,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionConfig {
    pub t_max: usize,
    /// Feature width after the backbone.
    pub d: usize,
    pub heads: usize,
    /// Channels of the full-resolution and half-resolution backbone stages.
    pub channels: (usize, usize),
    pub smn: SmnVariant,
    pub smn_layers: usize,
    pub unet: UNetConfig,
    pub attn: AttnConfig,
    pub symbols: String,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            t_max: 8,
            d: 32,
            heads: 4,
            channels: (8, 16),
            smn: SmnVariant::Conv,
            smn_layers: 2,
            unet: UNetConfig::default(),
            attn: AttnConfig::default(),
            symbols: crate::lm::DEFAULT_SYMBOLS.into(),
        }
    }
}

impl VisionConfig {
    pub fn canvas(&self) -> (usize, usize) {
        (CELL_H, CELL_W * self.t_max)
    }

    /// Spatial size after the backbone.
    pub fn feature_hw(&self) -> (usize, usize) {
        let (h, w) = self.canvas();
        (h / 4, w / 4)
    }

    pub fn seq_len(&self) -> usize {
        self.t_max + 1
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            d: self.d,
            heads: self.heads,
            ffn_multiplier: 4,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 || self.d % 4 != 0 || self.channels.0 == 0 || self.channels.1 == 0 {
            return Err(Error::Config(format!(
                "vision model needs t_max > 0, width divisible by 4 and non-empty stages, got {self:?}"
            )));
        }
        self.block().validate()?;
        if self.attn.mode == AttnMode::Pca && self.attn.iters == 0 {
            return Err(Error::Config("position-and-content attention needs at least one iteration".into()));
        }
        let (h, w) = self.feature_hw();
        if self.smn == SmnVariant::Transformer && h * w > SMN_MAX_POSITIONS {
            return Err(Error::Config(format!(
                "transformer sequence model refuses {} positions (limit {SMN_MAX_POSITIONS}); use the convolutional variant",
                h * w
            )));
        }
        unet_levels(&self.unet.strides, h, w)?;
        Charset::from_symbols(&self.symbols).map(|_| ())
    }
}

/// Spatial size at every U-Net level, rejecting strides that do not divide
/// the map exactly.
pub fn unet_levels(strides: &[(usize, usize)], h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
    let mut levels = vec![(h, w)];
    let (mut ch, mut cw) = (h, w);
    for &(sh, sw) in strides {
        if sh == 0 || sw == 0 || ch % sh != 0 || cw % sw != 0 {
            return Err(Error::Config(format!(
                "U-Net strides {strides:?} do not divide the {h}x{w} feature map"
            )));
        }
        ch /= sh;
        cw /= sw;
        levels.push((ch, cw));
    }
    Ok(levels)
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut Rng) -> Self {
        let g = ConvGeom::same3x3((1, 1));
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c, c, g, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c, c, g, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h)?;
        let s = tape.add(x, h)?;
        Ok(tape.relu(s))
    }
}

/// Residual convolution stack with two stride-2 reductions.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv2d,
    block1: ResBlock,
    down1: Conv2d,
    block2: ResBlock,
    block3: ResBlock,
    down2: Conv2d,
    block4: ResBlock,
    block5: ResBlock,
    norm: LayerNorm,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &VisionConfig, rng: &mut Rng) -> Self {
        let (c1, c2) = cfg.channels;
        let same = ConvGeom::same3x3((1, 1));
        let half = ConvGeom::same3x3((2, 2));
        Self {
            stem: Conv2d::new(store, &format!("{name}.stem"), 1, c1, same, rng),
            block1: ResBlock::new(store, &format!("{name}.block1"), c1, rng),
            down1: Conv2d::new(store, &format!("{name}.down1"), c1, c2, half, rng),
            block2: ResBlock::new(store, &format!("{name}.block2"), c2, rng),
            block3: ResBlock::new(store, &format!("{name}.block3"), c2, rng),
            down2: Conv2d::new(store, &format!("{name}.down2"), c2, cfg.d, half, rng),
            block4: ResBlock::new(store, &format!("{name}.block4"), cfg.d, rng),
            block5: ResBlock::new(store, &format!("{name}.block5"), cfg.d, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.d),
        }
    }

    /// `[B, h, w, 1] -> [B, h/4, w/4, d]`
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[3] != 1 || s[1] % 4 != 0 || s[2] % 4 != 0 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "backbone expects [B, h, w, 1] with h and w divisible by 4".into(),
            });
        }
        let x = self.stem.forward(tape, x)?;
        let x = tape.relu(x);
        let x = self.block1.forward(tape, x)?;
        let x = self.down1.forward(tape, x)?;
        let x = tape.relu(x);
        let x = self.block2.forward(tape, x)?;
        let x = self.block3.forward(tape, x)?;
        let x = self.down2.forward(tape, x)?;
        let x = tape.relu(x);
        let x = self.block4.forward(tape, x)?;
        let x = self.block5.forward(tape, x)?;
        self.norm.forward(tape, x)
    }
}

/// Contextualizes backbone features while preserving their shape.
#[derive(Clone, Debug)]
pub enum SequenceModel {
    Transformer(Vec<TransformerEncoderLayer>),
    Conv(Vec<ResBlock>),
}

impl SequenceModel {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &VisionConfig, rng: &mut Rng) -> Result<Self> {
        Ok(match cfg.smn {
            SmnVariant::Transformer => Self::Transformer(
                (0..cfg.smn_layers)
                    .map(|i| TransformerEncoderLayer::new(store, &format!("{name}.layer{i}"), &cfg.block(), rng))
                    .collect::<Result<_>>()?,
            ),
            SmnVariant::Conv => Self::Conv(
                (0..cfg.smn_layers)
                    .map(|i| ResBlock::new(store, &format!("{name}.layer{i}"), cfg.d, rng))
                    .collect(),
            ),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, h, w, d) = (s[0], s[1], s[2], s[3]);
        match self {
            Self::Transformer(layers) => {
                if h * w > SMN_MAX_POSITIONS {
                    return Err(Error::Config(format!(
                        "transformer sequence model refuses {} positions (limit {SMN_MAX_POSITIONS})",
                        h * w
                    )));
                }
                let pe = tape.constant(positional_encoding_2d(h, w, d)?.reshape(&[h * w, d])?);
                let flat = tape.reshape(x, &[b, h * w, d])?;
                let mut y = tape.add_broadcast(flat, pe)?;
                let mask = AttentionMask::stack(&vec![AttentionMask::open(h * w, h * w); b])?;
                for layer in layers {
                    y = layer.forward(tape, y, &mask)?;
                }
                tape.reshape(y, &[b, h, w, d])
            }
            Self::Conv(blocks) => {
                let pe = tape.constant(positional_encoding_2d(h, w, d)?.reshape(&[h * w, d])?);
                let flat = tape.reshape(x, &[b, h * w, d])?;
                let flat = tape.add_broadcast(flat, pe)?;
                let mut y = tape.reshape(flat, &[b, h, w, d])?;
                for block in blocks {
                    y = block.forward(tape, y)?;
                }
                Ok(y)
            }
        }
    }
}

/// Mini U-Net producing attention keys, with an optional transformer over
/// the single-row finest map.
#[derive(Clone, Debug)]
pub struct UNet {
    strides: Vec<(usize, usize)>,
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    hfa: Vec<TransformerEncoderLayer>,
}

impl UNet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &VisionConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d;
        let strides = cfg.unet.strides.clone();
        let down = strides
            .iter()
            .enumerate()
            .map(|(i, &s)| Conv2d::new(store, &format!("{name}.down{i}"), d, d, ConvGeom::same3x3(s), rng))
            .collect();
        let up = (0..strides.len())
            .map(|i| Conv2d::new(store, &format!("{name}.up{i}"), d, d, ConvGeom::same3x3((1, 1)), rng))
            .collect();
        let hfa = if cfg.unet.hfa {
            (0..cfg.unet.hfa_layers)
                .map(|i| TransformerEncoderLayer::new(store, &format!("{name}.hfa{i}"), &cfg.block(), rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self { strides, down, up, hfa })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let levels = unet_levels(&self.strides, s[1], s[2])?;
        let mut skips = vec![x];
        let mut h = x;
        for conv in &self.down {
            h = conv.forward(tape, h)?;
            h = tape.relu(h);
            skips.push(h);
        }
        if !self.hfa.is_empty() {
            let (fh, fw) = *levels.last().expect("at least one level");
            if fh != 1 {
                return Err(Error::Config(format!(
                    "horizontal aggregation needs a single-row finest map, got {fh}x{fw}"
                )));
            }
            let (b, d) = (s[0], s[3]);
            let pe = tape.constant(positional_encoding(fw, d)?);
            let flat = tape.reshape(h, &[b, fw, d])?;
            let mut y = tape.add_broadcast(flat, pe)?;
            let mask = AttentionMask::stack(&vec![AttentionMask::open(fw, fw); b])?;
            for layer in &self.hfa {
                y = layer.forward(tape, y, &mask)?;
            }
            h = tape.reshape(y, &[b, 1, fw, d])?;
        }
        for (i, conv) in self.up.iter().enumerate().rev() {
            h = tape.upsample(h, self.strides[i])?;
            h = conv.forward(tape, h)?;
            if i > 0 {
                h = tape.relu(h);
            }
            h = tape.add(h, skips[i])?;
        }
        Ok(h)
    }
}

/// Everything the vision model computes for one batch.
#[derive(Clone, Debug)]
pub struct VisionOutput {
    /// `[B, h', w', d]` contextual features.
    pub feature_map: Var,
    /// Per attention iteration `[B, T, d]`.
    pub features: Vec<Var>,
    /// Per attention iteration `[B, T, c]`.
    pub logits: Vec<Var>,
    /// Attention maps of the last iteration, `[B, T, h' * w']`.
    pub maps: Var,
}

impl VisionOutput {
    pub fn last_features(&self) -> Var {
        *self.features.last().expect("at least one iteration")
    }

    pub fn last_logits(&self) -> Var {
        *self.logits.last().expect("at least one iteration")
    }
}

/// Backbone, sequence model, U-Net keys and position attention.
#[derive(Clone, Debug)]
pub struct VisionModel {
    cfg: VisionConfig,
    charset: Charset,
    pub backbone: Backbone,
    pub smn: SequenceModel,
    pub unet: UNet,
    /// Shared projection of the content glimpse, `[d, d]`.
    pub content_proj: Option<ParamId>,
    /// Position-specific content table, `[T, d]`.
    pub content_table: Option<ParamId>,
    /// Projection of the positional queries.
    pub query: Linear,
    /// Learned per-position query offsets, `[T, d]`.
    pub query_table: ParamId,
    pub key_norm: LayerNorm,
    pub cls: Linear,
}

impl VisionModel {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &VisionConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let charset = Charset::from_symbols(&cfg.symbols)?;
        let (content_proj, content_table) = match cfg.attn.mode {
            AttnMode::Pa => (None, None),
            AttnMode::Pca => (
                Some(store.register(format!("{prefix}.content.w"), Tensor::zeros(&[cfg.d, cfg.d]))),
                Some(store.register(format!("{prefix}.content.table"), Tensor::zeros(&[cfg.seq_len(), cfg.d]))),
            ),
        };
        Ok(Self {
            backbone: Backbone::new(store, &format!("{prefix}.backbone"), cfg, rng),
            smn: SequenceModel::new(store, &format!("{prefix}.smn"), cfg, rng)?,
            unet: UNet::new(store, &format!("{prefix}.unet"), cfg, rng)?,
            content_proj,
            content_table,
            query: Linear::new(store, &format!("{prefix}.query"), cfg.d, cfg.d, true, rng),
            query_table: store.register(format!("{prefix}.query_table"), Tensor::uniform(&[cfg.seq_len(), cfg.d], 1.0, rng)),
            key_norm: LayerNorm::new(store, &format!("{prefix}.key_norm"), cfg.d),
            cls: Linear::new(store, &format!("{prefix}.cls"), cfg.d, charset.num_classes(), true, rng),
            cfg: cfg.clone(),
            charset,
        })
    }

    pub fn config(&self) -> &VisionConfig {
        &self.cfg
    }

    pub fn charset(&self) -> &Charset {
        &self.charset
    }

    /// `images: [B, 16, 8 * t_max, 1]`.
    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<VisionOutput> {
        let s = tape.shape(images).to_vec();
        let (ch, cw) = self.cfg.canvas();
        if s.len() != 4 || s[1] != ch || s[2] != cw || s[3] != 1 {
            return Err(Error::shape("vision input", &s, &[s.first().copied().unwrap_or(0), ch, cw, 1]));
        }
        let fb = self.backbone.forward(tape, images)?;
        let fm = self.smn.forward(tape, fb)?;
        let keys = self.unet.forward(tape, fm)?;
        self.attend(tape, fm, keys)
    }

    /// Position attention (and its content-refined iterations) over
    /// `feature_map` with precomputed `keys` of the same shape.
    pub fn attend(&self, tape: &mut Tape, feature_map: Var, keys: Var) -> Result<VisionOutput> {
        let s = tape.shape(feature_map).to_vec();
        let (b, h, w, d) = (s[0], s[1], s[2], s[3]);
        let t = self.cfg.seq_len();
        let n = h * w;
        let k = tape.reshape(keys, &[b, n, d])?;
        let k = self.key_norm.forward(tape, k)?;
        let v = tape.reshape(feature_map, &[b, n, d])?;
        let pe = tape.constant(repeat_batch(&positional_encoding(t, d)?, b));
        let pe = self.query.forward(tape, pe)?;
        let qt = tape.param(self.query_table);
        let pe = tape.add_broadcast(pe, qt)?;
        let content = match (self.content_proj, self.content_table) {
            (Some(proj), Some(table)) => Some((tape.param(proj), tape.param(table))),
            _ => None,
        };
        let mut glimpse = match content {
            Some(_) => {
                let pooled = tape.mean_dim1(v)?;
                let pooled = tape.reshape(pooled, &[b, 1, 1, d])?;
                let pooled = tape.upsample(pooled, (t, 1))?;
                Some(tape.reshape(pooled, &[b, t, d])?)
            }
            None => None,
        };
        let scale = 1.0 / (d as f64).sqrt();
        let mut features = Vec::new();
        let mut logits = Vec::new();
        let mut maps = None;
        for _ in 0..self.cfg.attn.effective_iters() {
            let q = match (content, glimpse) {
                (Some((proj, table)), Some(g)) => {
                    let c = tape.matmul(g, proj)?;
                    let c = tape.add_broadcast(c, table)?;
                    tape.add(pe, c)?
                }
                _ => pe,
            };
            let scores = tape.bmm(q, k, true)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores, 2)?;
            let fv = tape.bmm(weights, v, false)?;
            logits.push(self.cls.forward(tape, fv)?);
            features.push(fv);
            maps = Some(weights);
            if glimpse.is_some() {
                glimpse = Some(fv);
            }
        }
        Ok(VisionOutput {
            feature_map,
            features,
            logits,
            maps: maps.expect("at least one iteration"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn cfg(smn: SmnVariant, mode: AttnMode, hfa: bool) -> VisionConfig {
        VisionConfig {
            t_max: 4,
            d: 16,
            heads: 2,
            channels: (4, 8),
            smn,
            smn_layers: 1,
            unet: UNetConfig {
                strides: vec![(2, 2), (2, 2), (1, 2)],
                hfa,
                hfa_layers: 1,
            },
            attn: AttnConfig { mode, iters: 2 },
            ..VisionConfig::default()
        }
    }

    #[test]
    fn shapes_across_the_config_matrix() {
        for smn in [SmnVariant::Transformer, SmnVariant::Conv] {
            for mode in [AttnMode::Pa, AttnMode::Pca] {
                for hfa in [false, true] {
                    let c = cfg(smn, mode, hfa);
                    let mut store = ParamStore::new();
                    let vm = VisionModel::new(&mut store, "vm", &c, &mut rng_from_seed(1)).unwrap();
                    let mut tape = Tape::with_params(&store);
                    let x = tape.constant(Tensor::from_fn(&[2, 16, 32, 1], |i| ((i * 31) % 7) as f64 / 7.0));
                    let out = vm.forward(&mut tape, x).unwrap();
                    assert_eq!(tape.shape(out.feature_map), &[2, 4, 8, 16]);
                    assert_eq!(out.logits.len(), c.attn.effective_iters());
                    assert_eq!(tape.shape(out.last_logits()), &[2, 5, 38]);
                    assert_eq!(tape.shape(out.maps), &[2, 5, 32]);
                    for r in 0..tape.value(out.maps).rows() {
                        let sum: f64 = tape.value(out.maps).row(r).iter().sum();
                        assert!((sum - 1.0).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn indivisible_strides_are_rejected() {
        assert!(unet_levels(&[(2, 2), (2, 2), (1, 2), (1, 2)], 4, 16).is_ok());
        assert!(unet_levels(&[(2, 2), (2, 2), (1, 2), (1, 2)], 4, 12).is_err());
    }

    #[test]
    fn transformer_sequence_model_refuses_long_canvases() {
        let mut c = cfg(SmnVariant::Transformer, AttnMode::Pa, false);
        c.t_max = 132;
        c.unet.strides = vec![(2, 2), (2, 2), (1, 2), (1, 2)];
        assert!(c.validate().is_err());
        c.smn = SmnVariant::Conv;
        c.t_max = 100;
        c.unet.strides = vec![(2, 2), (2, 2), (1, 2), (1, 5)];
        c.validate().unwrap();
    }
}
