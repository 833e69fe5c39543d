//! Character language models: the bidirectional cloze network, its causal
//! comparator, stand-alone pre-training and top-k decoding.

mod charset;
mod decode;
mod model;
pub mod prob;
mod train;

pub use charset::{Charset, DEFAULT_SYMBOLS};
pub use decode::{topk_decode, topk_strings, Candidate};
pub use model::{EnsembleLm, LanguageModel, LmConfig, LmInput, LmOutput, LmVariant};
pub(crate) use model::repeat_batch;
pub use prob::ProbSequence;
pub use train::{cloze_accuracy, evaluate_spelling, lm_correct, pretrain_lm, ClozeAccuracy, LmModel, PretrainConfig, PretrainReport};
