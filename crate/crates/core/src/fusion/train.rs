use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{total_loss, LossTargets, Pipeline};
use crate::numerics::{AdamState, Tape};
use crate::rng::SeedTree;
use crate::vision::{image_batch, mixed_batch, warmup_lr, score_texts, GlyphImage, NoiseParams, RecognitionScore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_v: f64,
    pub lambda_l: f64,
    /// Correction iterations M, used in training and evaluation.
    pub iters: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Steps of linear learning-rate warmup.
    pub warmup_steps: usize,
    /// Step after which the learning rate drops tenfold.
    pub lr_decay_step: Option<usize>,
    pub clip_norm: Option<f64>,
    pub noise: NoiseParams,
    /// Share of each batch rendered without noise.
    pub clean_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_v: 1.0,
            lambda_l: 1.0,
            iters: 3,
            steps: 600,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 100,
            lr_decay_step: None,
            clip_norm: Some(5.0),
            noise: NoiseParams::moderate(),
            clean_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.lambda_v >= 0.0 && self.lambda_l >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.clean_fraction) {
            return Err(Error::Config("clean fraction must lie in [0, 1]".into()));
        }
        self.noise.validate()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let lr = warmup_lr(self.lr, self.warmup_steps, step);
        match self.lr_decay_step {
            Some(s) if step >= s => lr * 0.1,
            _ => lr,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub l_v: f64,
    pub l_l: Vec<f64>,
    pub l_f: Vec<f64>,
    pub lr: f64,
    pub wall_seconds: f64,
}

/// One optimizer update on `images` against `targets`.
pub fn train_step(
    pipeline: &mut Pipeline,
    adam: &mut AdamState,
    images: &[GlyphImage],
    targets: &LossTargets,
    cfg: &TrainConfig,
    step: usize,
    dropout_seed: u64,
) -> Result<StepRecord> {
    let (record, grads) = {
        let mut tape = Tape::with_params(&pipeline.store);
        tape.enable_dropout(dropout_seed);
        let x = tape.constant(image_batch(images)?);
        let out = pipeline.forward(&mut tape, x, cfg.iters)?;
        let terms = total_loss(&mut tape, &out, targets, cfg.lambda_v, cfg.lambda_l)?;
        let v = |x| tape.value(x).item();
        let record = StepRecord {
            step,
            loss: v(terms.total),
            l_v: v(terms.vision),
            l_l: terms.lm.iter().map(|&x| v(x)).collect(),
            l_f: terms.fused.iter().map(|&x| v(x)).collect(),
            lr: cfg.lr_at(step),
            wall_seconds: 0.0,
        };
        tape.backward(terms.total)?;
        (record, tape.param_grads())
    };
    if !record.loss.is_finite() {
        return Err(Error::Diverged { step, loss: record.loss });
    }
    pipeline.store.zero_grad();
    pipeline.store.accumulate_grads(&grads)?;
    adam.lr = record.lr;
    adam.step(&mut pipeline.store)?;
    Ok(record)
}

/// Builds the optimizer configured by `cfg`.
pub fn new_optimizer(cfg: &TrainConfig) -> AdamState {
    let mut adam = AdamState::new(cfg.lr);
    adam.clip_norm = cfg.clip_norm;
    adam
}

/// Trains the whole pipeline on freshly rendered `words` for `cfg.steps`
/// steps, passing every record to `on_step`.
pub fn train_supervised(
    pipeline: &mut Pipeline,
    words: &[String],
    cfg: &TrainConfig,
    seeds: &SeedTree,
    on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    let mut adam = new_optimizer(cfg);
    train_supervised_range(pipeline, &mut adam, words, cfg, seeds, 0..cfg.steps, on_step)
}

/// Runs the steps in `steps`. Every step draws its data from its own seed, so
/// a run split across several calls sees the same batches as a single call.
pub fn train_supervised_range(
    pipeline: &mut Pipeline,
    adam: &mut AdamState,
    words: &[String],
    cfg: &TrainConfig,
    seeds: &SeedTree,
    steps: Range<usize>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if words.is_empty() {
        return Err(Error::Config("no training words".into()));
    }
    let t_max = pipeline.config().vision.t_max;
    let t = pipeline.seq_len();
    let sample = seeds.child("train.sample");
    let dropout = seeds.child("train.dropout");
    let start = Instant::now();
    let mut records = Vec::with_capacity(steps.len());
    for step in steps {
        let key = step.to_string();
        let mut rng = sample.rng(&key);
        let imgs = mixed_batch(words, cfg.batch_size, cfg.clean_fraction, t_max, &cfg.noise, &mut rng)?;
        let texts: Vec<String> = imgs.iter().map(|i| i.text.clone()).collect();
        let targets = LossTargets::from_texts(pipeline.charset(), &texts, t)?;
        let mut record = train_step(pipeline, adam, &imgs, &targets, cfg, step, dropout.child(&key).seed())?;
        record.wall_seconds = start.elapsed().as_secs_f64();
        on_step(&record);
        records.push(record);
    }
    Ok(records)
}

/// Accuracies of every stage of the pipeline on one image set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineScores {
    pub vision: RecognitionScore,
    /// One entry per correction iteration.
    pub lm: Vec<RecognitionScore>,
    pub fused: Vec<RecognitionScore>,
}

impl PipelineScores {
    pub fn final_fused(&self) -> RecognitionScore {
        *self.fused.last().expect("at least one iteration")
    }
}

pub fn evaluate_pipeline(pipeline: &Pipeline, images: &[GlyphImage], iters: usize) -> Result<PipelineScores> {
    let refs: Vec<String> = images.iter().map(|i| i.text.clone()).collect();
    let trace = pipeline.trace(images, iters)?;
    Ok(PipelineScores {
        vision: score_texts(&trace.vision_texts, &refs),
        lm: trace.steps.iter().map(|s| score_texts(&s.lm_texts, &refs)).collect(),
        fused: trace.steps.iter().map(|s| score_texts(&s.fused_texts, &refs)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::PipelineConfig;
    use crate::nn::BlockConfig;

    fn tiny() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.vision.t_max = 4;
        cfg.vision.d = 16;
        cfg.vision.heads = 2;
        cfg.vision.channels = (4, 8);
        cfg.vision.unet.strides = vec![(2, 2), (2, 2), (1, 2)];
        cfg.lm.t_max = 4;
        cfg.lm.layers = 1;
        cfg.lm.block = BlockConfig::new(16, 2);
        cfg
    }

    fn words() -> Vec<String> {
        ["ab", "cat", "dog", "tree", "sun"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn split_run_matches_single_run() {
        let cfg = TrainConfig {
            steps: 4,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let seeds = SeedTree::new(2);
        let mut a = Pipeline::new(&tiny(), 1).unwrap();
        let ra = train_supervised(&mut a, &words(), &cfg, &seeds, |_| {}).unwrap();
        let mut b = Pipeline::new(&tiny(), 1).unwrap();
        let mut adam = new_optimizer(&cfg);
        let mut rb = train_supervised_range(&mut b, &mut adam, &words(), &cfg, &seeds, 0..2, |_| {}).unwrap();
        rb.extend(train_supervised_range(&mut b, &mut adam, &words(), &cfg, &seeds, 2..4, |_| {}).unwrap());
        let losses = |r: &[StepRecord]| r.iter().map(|x| x.loss).collect::<Vec<_>>();
        assert_eq!(losses(&ra), losses(&rb));
        assert_eq!(ra.last().unwrap().l_f.len(), 3);
    }

    #[test]
    fn scores_have_one_column_per_iteration() {
        let p = Pipeline::new(&tiny(), 1).unwrap();
        let imgs: Vec<_> = words()
            .iter()
            .map(|w| crate::vision::render_text(w, 4, &NoiseParams::clean(), 0).unwrap())
            .collect();
        let s = evaluate_pipeline(&p, &imgs, 3).unwrap();
        assert_eq!((s.lm.len(), s.fused.len()), (3, 3));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = TrainConfig {
            iters: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
