use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::prob::{softmax_rows, target_batch};
use crate::lm::ProbSequence;
use crate::numerics::{AdamState, ParamStore, Tape, Tensor, Var};
use crate::rng::SeedTree;
use crate::textdata::edit_distance;
use crate::vision::data::sample_batch;
use crate::vision::render::{image_batch, GlyphImage, NoiseParams};
use crate::vision::{VisionConfig, VisionModel, VisionOutput};

/// A vision model together with its parameters.
#[derive(Clone, Debug)]
pub struct VmModel {
    pub store: ParamStore,
    pub vm: VisionModel,
}

impl VmModel {
    pub const PREFIX: &'static str = "vm";

    pub fn new(cfg: &VisionConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(seed).rng("vm.init");
        let vm = VisionModel::new(&mut store, Self::PREFIX, cfg, &mut rng)?;
        Ok(Self { store, vm })
    }

    /// Vision-only predictions, one sequence per image, from the last
    /// attention iteration.
    pub fn predict(&self, images: &[GlyphImage]) -> Result<Vec<ProbSequence>> {
        Ok(self.predict_iters(images)?.pop().expect("at least one iteration"))
    }

    /// Predictions of every attention iteration: `out[i][b]`.
    pub fn predict_iters(&self, images: &[GlyphImage]) -> Result<Vec<Vec<ProbSequence>>> {
        let iters = self.vm.config().attn.effective_iters();
        let mut out = vec![Vec::with_capacity(images.len()); iters];
        for chunk in images.chunks(32) {
            let mut tape = Tape::with_params(&self.store);
            let x = tape.constant(image_batch(chunk)?);
            let vo = self.vm.forward(&mut tape, x)?;
            for (i, &l) in vo.logits.iter().enumerate() {
                out[i].extend(split_sequences(&softmax_rows(tape.value(l)))?);
            }
        }
        Ok(out)
    }
}

/// Splits a `[B, T, c]` tensor into per-instance sequences.
pub fn split_sequences(batch: &Tensor) -> Result<Vec<ProbSequence>> {
    let s = batch.shape();
    let (b, t, c) = (s[0], s[1], s[2]);
    (0..b)
        .map(|i| ProbSequence::new(Tensor::new(vec![t, c], batch.data()[i * t * c..(i + 1) * t * c].to_vec())?))
        .collect()
}

/// Recognition loss summed over attention iterations.
pub fn vision_loss(tape: &mut Tape, out: &VisionOutput, targets: &[usize], ignore: &[bool]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &l in &out.logits {
        let ce = tape.cross_entropy(l, targets, ignore)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    total.ok_or(Error::EmptyMask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Steps of linear learning-rate warmup.
    pub warmup_steps: usize,
    pub clip_norm: Option<f64>,
    pub noise: NoiseParams,
    /// Share of each batch rendered without noise.
    pub clean_fraction: f64,
}

impl Default for VisionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 100,
            clip_norm: Some(5.0),
            noise: NoiseParams::moderate(),
            clean_fraction: 0.5,
        }
    }
}

/// Linear warmup from `lr / warmup` to `lr` over the first `warmup` steps.
pub fn warmup_lr(lr: f64, warmup: usize, step: usize) -> f64 {
    if step < warmup {
        lr * (step + 1) as f64 / warmup as f64
    } else {
        lr
    }
}

/// Mixed clean/noisy batch of renders.
pub(crate) fn mixed_batch(
    words: &[String],
    batch: usize,
    clean_fraction: f64,
    t_max: usize,
    noise: &NoiseParams,
    rng: &mut crate::rng::Rng,
) -> Result<Vec<GlyphImage>> {
    let n_clean = (batch as f64 * clean_fraction).round() as usize;
    let mut imgs = sample_batch(words, n_clean, t_max, &NoiseParams::clean(), rng)?;
    imgs.extend(sample_batch(words, batch - n_clean, t_max, noise, rng)?);
    Ok(imgs)
}

/// Trains the vision model alone on freshly rendered words.
pub fn train_vision(model: &mut VmModel, words: &[String], cfg: &VisionTrainConfig, seeds: &SeedTree) -> Result<Vec<f64>> {
    if words.is_empty() {
        return Err(Error::Config("no training words".into()));
    }
    let t_max = model.vm.config().t_max;
    let t = model.vm.config().seq_len();
    let mut rng = seeds.rng("vm.train.sample");
    let mut adam = AdamState::new(cfg.lr);
    adam.clip_norm = cfg.clip_norm;
    let start = Instant::now();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let imgs = mixed_batch(words, cfg.batch_size, cfg.clean_fraction, t_max, &cfg.noise, &mut rng)?;
        let texts: Vec<String> = imgs.iter().map(|i| i.text.clone()).collect();
        let (targets, ignore) = target_batch(model.vm.charset(), &texts, t)?;
        let (loss, grads) = {
            let mut tape = Tape::with_params(&model.store);
            let x = tape.constant(image_batch(&imgs)?);
            let out = model.vm.forward(&mut tape, x)?;
            let loss = vision_loss(&mut tape, &out, &targets, &ignore)?;
            let v = tape.value(loss).item();
            tape.backward(loss)?;
            (v, tape.param_grads())
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        model.store.zero_grad();
        model.store.accumulate_grads(&grads)?;
        adam.lr = warmup_lr(cfg.lr, cfg.warmup_steps, step);
        adam.step(&mut model.store)?;
        losses.push(loss);
        if step % 50 == 0 {
            log::debug!("vision step {step} loss {loss:.4} ({:.1}s)", start.elapsed().as_secs_f64());
        }
    }
    Ok(losses)
}

/// Word accuracy and one-minus-normalized-edit-distance of decoded
/// predictions against references.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RecognitionScore {
    pub word_accuracy: f64,
    pub char_accuracy: f64,
}

pub fn score_texts(predicted: &[String], references: &[String]) -> RecognitionScore {
    let n = references.len().max(1) as f64;
    let exact = predicted.iter().zip(references).filter(|(p, r)| p == r).count();
    let ed: usize = predicted.iter().zip(references).map(|(p, r)| edit_distance(p, r)).sum();
    let len: usize = references.iter().map(|r| r.chars().count()).sum();
    RecognitionScore {
        word_accuracy: exact as f64 / n,
        char_accuracy: (1.0 - ed as f64 / len.max(1) as f64).max(0.0),
    }
}

/// Scores every attention iteration of the vision model on `images`.
pub fn evaluate_vision(model: &VmModel, images: &[GlyphImage]) -> Result<Vec<RecognitionScore>> {
    let refs: Vec<String> = images.iter().map(|i| i.text.clone()).collect();
    let cs = model.vm.charset();
    Ok(model
        .predict_iters(images)?
        .iter()
        .map(|seqs| {
            let preds: Vec<String> = seqs.iter().map(|s| s.decode(cs)).collect();
            score_texts(&preds, &refs)
        })
        .collect())
}
