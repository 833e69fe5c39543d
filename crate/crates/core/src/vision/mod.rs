//! Toy vision model: glyph rendering, a residual convolution backbone,
//! a sequence model, U-Net attention keys and position (and content)
//! attention.

pub mod data;
mod font;
mod model;
mod render;
mod train;

pub use font::{glyph, GLYPH_H, GLYPH_W};
pub use model::{
    unet_levels, AttnConfig, AttnMode, Backbone, ResBlock, SequenceModel, SmnVariant, UNet, UNetConfig, VisionConfig,
    VisionModel, VisionOutput, SMN_MAX_POSITIONS,
};
pub use render::{heat_raster, image_batch, render_text, write_pgm, GlyphImage, NoiseParams, CELL_H, CELL_W, MAX_JITTER};
pub use train::{
    evaluate_vision, score_texts, split_sequences, train_vision, vision_loss, warmup_lr, RecognitionScore, VisionTrainConfig,
    VmModel,
};
pub(crate) use train::mixed_batch;
