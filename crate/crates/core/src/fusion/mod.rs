//! Gated fusion of vision and language features, iterative correction and
//! supervised training of the whole recognizer.

mod gate;
mod pipeline;
mod train;

pub use gate::{Fusion, FusionOutput};
pub use pipeline::{
    concat_batch, decode_batch, total_loss, CorrectionStep, IterationTrace, LossTargets, LossTerms, Pipeline, PipelineConfig,
    PipelineOutput, TraceStep,
};
pub use train::{
    evaluate_pipeline, new_optimizer, train_step, train_supervised, train_supervised_range, PipelineScores, StepRecord, TrainConfig,
};
