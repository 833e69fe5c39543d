//! Corpora, text augmentation, the spelling benchmark and recognition
//! metrics.

mod augment;
mod benchmark;
mod corpus;
mod metrics;

pub use augment::{osa_fill, saa_perturb, AugConfig, AugOp};
pub use benchmark::{make_spelling_benchmark, BenchItem, BenchRatios, EditCategory, SpellingBenchmark};
pub use corpus::{embedded_words, load_corpus, parse_corpus, Corpus, CorpusOptions, EMBEDDED_WORDS};
pub use metrics::{edit_distance, metrics, Metrics, CHAR_ACCURACY_DEFINITION};
