use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::prob::{one_hot_batch, softmax_rows, target_batch, ProbSequence};
use crate::lm::{LanguageModel, LmConfig};
use crate::numerics::{AdamState, ParamStore, Tape, Tensor};
use crate::rng::SeedTree;
use crate::lm::topk_strings;
use crate::textdata::{metrics, osa_fill, saa_perturb, AugConfig, BenchItem, Metrics};

/// A language model together with the parameters it reads.
#[derive(Clone, Debug)]
pub struct LmModel {
    pub store: ParamStore,
    pub lm: LanguageModel,
}

impl LmModel {
    pub const PREFIX: &'static str = "lm";

    pub fn new(cfg: &LmConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(seed).rng("lm.init");
        let lm = LanguageModel::new(&mut store, Self::PREFIX, cfg, &mut rng)?;
        Ok(Self { store, lm })
    }

    pub fn config(&self) -> &LmConfig {
        self.lm.config()
    }

    /// Corrects a batch of texts, one distribution sequence per text.
    pub fn correct_batch(&self, texts: &[String]) -> Result<Vec<ProbSequence>> {
        let t = self.config().seq_len();
        let c = self.lm.charset().num_classes();
        let (input, lengths) = one_hot_batch(self.lm.charset(), texts, t)?;
        let mut tape = Tape::with_params(&self.store);
        let x = tape.constant(input);
        let out = self.lm.forward(&mut tape, x, &lengths)?;
        let probs = softmax_rows(tape.value(out.logits));
        (0..texts.len())
            .map(|b| {
                let rows = probs.data()[b * t * c..(b + 1) * t * c].to_vec();
                ProbSequence::new(Tensor::new(vec![t, c], rows)?)
            })
            .collect()
    }
}

/// Runs the model on a one-hot encoding of `noisy_text` and returns the
/// softmax of its logits.
pub fn lm_correct(noisy_text: &str, model: &LmModel) -> Result<ProbSequence> {
    let mut out = model.correct_batch(&[noisy_text.to_string()])?;
    Ok(out.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Optional wall-clock cap in seconds; training stops at whichever
    /// budget is exhausted first.
    pub max_seconds: Option<f64>,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub aug: AugConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            max_seconds: None,
            lr: 1e-3,
            clip_norm: Some(5.0),
            aug: AugConfig {
                lm_batch: 64,
                ..AugConfig::default()
            },
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.aug.lm_batch == 0 {
            return Err(Error::Config("language-model batch must be positive".into()));
        }
        self.aug.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    /// Corpus entries skipped for exceeding the model length.
    pub skipped_long: usize,
    pub wall_seconds: f64,
}

/// One optimization batch: noisy inputs and clean targets.
pub(crate) fn lm_batch_loss(tape: &mut Tape, lm: &LanguageModel, noisy: &[String], clean: &[String]) -> Result<crate::numerics::Var> {
    let t = lm.config().seq_len();
    let (input, lengths) = one_hot_batch(lm.charset(), noisy, t)?;
    let (targets, ignore) = target_batch(lm.charset(), clean, t)?;
    let x = tape.constant(input);
    let out = lm.forward(tape, x, &lengths)?;
    tape.cross_entropy(out.logits, &targets, &ignore)
}

/// Trains `model` as a spelling corrector: each step draws a batch from
/// `corpus`, perturbs every text with one random edit and fits the clean
/// text.
pub fn pretrain_lm(model: &mut LmModel, corpus: &[String], cfg: &PretrainConfig, seeds: &SeedTree) -> Result<PretrainReport> {
    cfg.validate()?;
    let t_max = model.config().t_max;
    let usable: Vec<String> = corpus
        .iter()
        .filter(|w| !w.is_empty() && w.chars().count() <= t_max)
        .cloned()
        .collect();
    let skipped_long = corpus.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Config("no corpus entry fits the language model".into()));
    }
    if skipped_long > 0 {
        log::info!("skipped {skipped_long} corpus entries longer than {t_max}");
    }
    let mut rng = seeds.rng("lm.pretrain.sample");
    let mut adam = AdamState::new(cfg.lr);
    adam.clip_norm = cfg.clip_norm;
    let dropout_seeds = seeds.child("lm.pretrain.dropout");
    let start = Instant::now();
    let budget = cfg.max_seconds.map(Duration::from_secs_f64);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if budget.is_some_and(|b| start.elapsed() >= b) {
            break;
        }
        let clean = osa_fill(&[], &usable, cfg.aug.lm_batch, &mut rng)?;
        let noisy: Vec<String> = clean
            .iter()
            .map(|w| saa_perturb(w, &cfg.aug, model.lm.charset(), t_max, &mut rng).0)
            .collect();
        let (loss, grads) = {
            let mut tape = Tape::with_params(&model.store);
            tape.enable_dropout(dropout_seeds.child(&step.to_string()).seed());
            let loss = lm_batch_loss(&mut tape, &model.lm, &noisy, &clean)?;
            let value = tape.value(loss).item();
            tape.backward(loss)?;
            (value, tape.param_grads())
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        model.store.zero_grad();
        model.store.accumulate_grads(&grads)?;
        adam.step(&mut model.store)?;
        losses.push(loss);
    }
    Ok(PretrainReport {
        losses,
        skipped_long,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Accuracy of reconstructing clean words from clean input, per position
/// (end marker included) and per word.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClozeAccuracy {
    pub position: f64,
    pub word: f64,
}

pub fn cloze_accuracy(model: &LmModel, words: &[String]) -> Result<ClozeAccuracy> {
    let t = model.config().seq_len();
    let cs = model.lm.charset();
    let (mut hits, mut total, mut words_ok) = (0usize, 0usize, 0usize);
    for chunk in words.chunks(128) {
        let outs = model.correct_batch(chunk)?;
        let (targets, ignore) = target_batch(cs, chunk, t)?;
        for (b, seq) in outs.iter().enumerate() {
            let pred = seq.argmax();
            let mut all = true;
            for p in 0..t {
                if ignore[b * t + p] {
                    continue;
                }
                total += 1;
                if pred[p] == targets[b * t + p] {
                    hits += 1;
                } else {
                    all = false;
                }
            }
            words_ok += usize::from(all);
        }
    }
    Ok(ClozeAccuracy {
        position: hits as f64 / total.max(1) as f64,
        word: words_ok as f64 / words.len().max(1) as f64,
    })
}

/// Corrects every noisy benchmark text and scores the top-`k` candidates
/// against the clean references.
pub fn evaluate_spelling(model: &LmModel, items: &[BenchItem], k: usize) -> Result<Metrics> {
    let mut predictions = Vec::with_capacity(items.len());
    for chunk in items.chunks(128) {
        let noisy: Vec<String> = chunk.iter().map(|i| i.noisy.clone()).collect();
        for seq in model.correct_batch(&noisy)? {
            let cands = topk_strings(&seq, model.lm.charset(), k);
            predictions.push(cands.into_iter().map(|(s, _)| s).collect());
        }
    }
    let references: Vec<String> = items.iter().map(|i| i.clean.clone()).collect();
    metrics(&predictions, &references)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmVariant;
    use crate::nn::BlockConfig;

    fn tiny() -> LmConfig {
        LmConfig {
            layers: 1,
            block: BlockConfig::new(16, 2).without_dropout(),
            t_max: 6,
            variant: LmVariant::Bcn,
            ..LmConfig::default()
        }
    }

    #[test]
    fn first_loss_is_near_uniform() {
        let mut model = LmModel::new(&tiny(), 1).unwrap();
        let cfg = PretrainConfig {
            steps: 1,
            ..PretrainConfig::default()
        };
        let words: Vec<String> = ["alpha", "beta", "gamma"].iter().map(|s| s.to_string()).collect();
        let report = pretrain_lm(&mut model, &words, &cfg, &SeedTree::new(1)).unwrap();
        let c = 38f64;
        assert!((report.losses[0] - c.ln()).abs() < 0.5, "{}", report.losses[0]);
    }

    #[test]
    fn long_entries_are_counted() {
        let mut model = LmModel::new(&tiny(), 1).unwrap();
        let cfg = PretrainConfig {
            steps: 1,
            ..PretrainConfig::default()
        };
        let words: Vec<String> = ["abc", "abcdefghij"].iter().map(|s| s.to_string()).collect();
        let report = pretrain_lm(&mut model, &words, &cfg, &SeedTree::new(1)).unwrap();
        assert_eq!(report.skipped_long, 1);
    }

    #[test]
    fn correction_rows_are_distributions() {
        let model = LmModel::new(&tiny(), 2).unwrap();
        let seq = lm_correct("oday", &model).unwrap();
        assert_eq!((seq.len(), seq.classes()), (7, 38));
        assert!(lm_correct("", &model).is_err());
    }
}
