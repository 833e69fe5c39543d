//! Attention and Transformer building blocks.

mod attention;
mod layers;
mod mask;
mod position;
mod transformer;

pub use attention::{AttentionOutput, MultiHeadAttention};
pub use layers::{BlockConfig, Conv2d, FeedForward, LayerNorm, Linear};
pub use mask::AttentionMask;
pub use position::{positional_encoding, positional_encoding_2d};
pub use transformer::{BcnLayer, TransformerEncoderLayer};
