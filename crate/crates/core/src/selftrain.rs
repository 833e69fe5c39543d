//! Ensemble self-training: certainty of iterated predictions, pseudo-label
//! filtering and the mixed labeled/pseudo-labeled training loop.

use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_entries, write_entries, Entry};
use crate::error::{Error, Result};
use crate::fusion::{new_optimizer, train_step, LossTargets, Pipeline, StepRecord, TrainConfig};
use crate::lm::prob::{argmax_rows, check_normalized, predicted_length, softmax_rows};
use crate::numerics::Tensor;
use crate::rng::SeedTree;
use crate::vision::{mixed_batch, GlyphImage};

/// How confident a single distribution is.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertaintyRule {
    /// `exp(sum_c p(c) ln p(c))`, the exponential of the negative entropy.
    #[default]
    Entropy,
    /// Largest class probability.
    MaxProb,
}

fn confidence(row: &[f64], rule: CertaintyRule) -> f64 {
    match rule {
        CertaintyRule::Entropy => row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>().exp(),
        CertaintyRule::MaxProb => row.iter().cloned().fold(0.0, f64::max),
    }
}

/// Certainty of one instance from its per-iteration `[t, c]` distributions:
/// each position keeps its most confident iteration and the instance is as
/// certain as its least certain position.
pub fn certainty(dists: &[Tensor], rule: CertaintyRule) -> Result<f64> {
    let first = dists.first().ok_or_else(|| Error::Config("certainty needs at least one iteration".into()))?;
    let t = first.rows();
    if t == 0 {
        return Err(Error::Config("certainty needs at least one position".into()));
    }
    for d in dists {
        if d.shape() != first.shape() {
            return Err(Error::shape("certainty", d.shape(), first.shape()));
        }
        check_normalized(d)?;
    }
    Ok((0..t)
        .map(|p| dists.iter().map(|d| confidence(d.row(p), rule)).fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::INFINITY, f64::min))
}

/// A prediction for an unlabeled image kept as a training target.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    /// Index of the image in the unlabeled set.
    pub id: usize,
    pub text: String,
    /// Fused distributions `[T, c]` of every correction iteration.
    pub dists: Vec<Tensor>,
    /// Positions that carry text or the end marker.
    pub length: usize,
    pub certainty: f64,
}

impl PseudoLabel {
    /// Final distribution, used as the soft target.
    pub fn target(&self) -> &Tensor {
        self.dists.last().expect("at least one iteration")
    }

    fn hard_target(&self) -> Result<Tensor> {
        let t = self.target();
        let c = t.last_dim();
        let mut data = vec![0.0; t.numel()];
        for (r, k) in argmax_rows(t).into_iter().enumerate() {
            data[r * c + k] = 1.0;
        }
        Tensor::new(t.shape().to_vec(), data)
    }
}

fn slice_rows(t: &Tensor, b: usize, rows: usize) -> Result<Tensor> {
    let c = t.last_dim();
    let start = b * rows * c;
    Tensor::new(vec![rows, c], t.data()[start..start + rows * c].to_vec())
}

/// Runs the pipeline with `iters` correction rounds on every image and
/// scores the result.
pub fn generate_pseudo_labels(pipeline: &Pipeline, images: &[GlyphImage], iters: usize, rule: CertaintyRule) -> Result<Vec<PseudoLabel>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let trace = pipeline.trace(images, iters)?;
    let t = pipeline.seq_len();
    let eos = pipeline.charset().eos();
    let probs: Vec<Tensor> = trace.steps.iter().map(|s| softmax_rows(&s.fused_logits)).collect();
    (0..images.len())
        .map(|b| {
            let dists = probs.iter().map(|p| slice_rows(p, b, t)).collect::<Result<Vec<_>>>()?;
            let last = dists.last().expect("at least one iteration");
            let length = predicted_length(last, eos, 1);
            let valid = dists.iter().map(|d| slice_rows(d, 0, length)).collect::<Result<Vec<_>>>()?;
            Ok(PseudoLabel {
                id: b,
                text: trace.texts()[b].clone(),
                certainty: certainty(&valid, rule)?,
                length,
                dists,
            })
        })
        .collect()
}

/// Labels whose certainty reaches `threshold`.
pub fn filter_pseudo(labels: &[PseudoLabel], threshold: f64) -> Vec<&PseudoLabel> {
    labels.iter().filter(|l| l.certainty >= threshold).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfTrainConfig {
    /// Certainty threshold Q.
    pub threshold: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub max_steps: usize,
    /// Step at which pseudo labels are regenerated and refiltered.
    pub refresh_step: usize,
    pub rule: CertaintyRule,
    /// Train on the argmax of pseudo distributions instead of the
    /// distributions themselves.
    pub hard_targets: bool,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            labeled_batch: 16,
            unlabeled_batch: 8,
            max_steps: 300,
            refresh_step: 150,
            rule: CertaintyRule::Entropy,
            hard_targets: false,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold {} must lie in (0, 1]", self.threshold)));
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.refresh_step > self.max_steps {
            return Err(Error::Config(format!(
                "refresh step {} exceeds max steps {}",
                self.refresh_step, self.max_steps
            )));
        }
        Ok(())
    }
}

/// Pseudo-label pool size after a (re)filtering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retention {
    pub step: usize,
    pub retained: usize,
    pub total: usize,
}

impl Retention {
    pub fn rate(&self) -> f64 {
        self.retained as f64 / self.total.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainRecord {
    #[serde(flatten)]
    pub step: StepRecord,
    pub labeled: usize,
    pub pseudo: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfTrainReport {
    pub records: Vec<SelfTrainRecord>,
    pub retention: Vec<Retention>,
    /// True when some step ran without pseudo-labeled data.
    pub labeled_only: bool,
}

fn refresh(pipeline: &Pipeline, unlabeled: &[GlyphImage], st: &SelfTrainConfig, iters: usize, step: usize) -> Result<(Vec<PseudoLabel>, Retention)> {
    let labels = generate_pseudo_labels(pipeline, unlabeled, iters, st.rule)?;
    let kept: Vec<PseudoLabel> = filter_pseudo(&labels, st.threshold).into_iter().cloned().collect();
    let retention = Retention {
        step,
        retained: kept.len(),
        total: labels.len(),
    };
    log::info!(
        "step {step}: retained {} of {} pseudo labels ({:.1}%)",
        retention.retained,
        retention.total,
        100.0 * retention.rate()
    );
    Ok((kept, retention))
}

/// Fine-tunes a warm-started pipeline on batches of rendered `labeled` words
/// joined by retained pseudo-labeled `unlabeled` images. The images' own
/// texts are never read.
pub fn self_train(
    pipeline: &mut Pipeline,
    labeled: &[String],
    unlabeled: &[GlyphImage],
    st: &SelfTrainConfig,
    train: &TrainConfig,
    seeds: &SeedTree,
    mut on_step: impl FnMut(&SelfTrainRecord),
) -> Result<SelfTrainReport> {
    st.validate()?;
    train.validate()?;
    if labeled.is_empty() {
        return Err(Error::Config("no labeled words".into()));
    }
    let t_max = pipeline.config().vision.t_max;
    let t = pipeline.seq_len();
    let mut adam = new_optimizer(train);
    let sample_seeds = seeds.child("self.sample");
    let dropout = seeds.child("self.dropout");
    let start = Instant::now();
    let (mut pool, first) = refresh(pipeline, unlabeled, st, train.iters, 0)?;
    let mut retention = vec![first];
    let mut records = Vec::with_capacity(st.max_steps);
    let mut labeled_only = false;
    for step in 0..st.max_steps {
        if step == st.refresh_step && step > 0 {
            let (p, r) = refresh(pipeline, unlabeled, st, train.iters, step)?;
            pool = p;
            retention.push(r);
        }
        let key = step.to_string();
        let mut rng = sample_seeds.rng(&key);
        let mut imgs = mixed_batch(labeled, st.labeled_batch, train.clean_fraction, t_max, &train.noise, &mut rng)?;
        let texts: Vec<String> = imgs.iter().map(|i| i.text.clone()).collect();
        let mut targets = LossTargets::from_texts(pipeline.charset(), &texts, t)?;
        let n_pseudo = st.unlabeled_batch.min(pool.len());
        if n_pseudo == 0 {
            if !labeled_only {
                log::warn!("no pseudo label passes threshold {}; training on labeled data only", st.threshold);
            }
            labeled_only = true;
        } else {
            let picks = sample(&mut rng, pool.len(), n_pseudo).into_vec();
            let hard: Vec<Tensor> = if st.hard_targets {
                picks.iter().map(|&i| pool[i].hard_target()).collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let soft: Vec<(&Tensor, usize)> = picks
                .iter()
                .enumerate()
                .map(|(j, &i)| (if st.hard_targets { &hard[j] } else { pool[i].target() }, pool[i].length))
                .collect();
            targets = targets.concat(&LossTargets::from_distributions(&soft)?)?;
            imgs.extend(picks.iter().map(|&i| unlabeled[pool[i].id].clone()));
        }
        let mut record = train_step(pipeline, &mut adam, &imgs, &targets, train, step, dropout.child(&key).seed())?;
        record.wall_seconds = start.elapsed().as_secs_f64();
        let rec = SelfTrainRecord {
            step: record,
            labeled: st.labeled_batch,
            pseudo: n_pseudo,
        };
        on_step(&rec);
        records.push(rec);
    }
    Ok(SelfTrainReport {
        records,
        retention,
        labeled_only,
    })
}

/// Writes pseudo labels to a tensor container: per instance the text as
/// class indices, its length, its certainty and the `[M, T, c]`
/// distributions at single precision.
pub fn save_pseudo_cache(path: &Path, labels: &[PseudoLabel], pipeline: &Pipeline) -> Result<()> {
    let cs = pipeline.charset();
    let mut entries = Vec::with_capacity(labels.len() * 4);
    for l in labels {
        let classes: Vec<f64> = cs.encode(&l.text)?.into_iter().map(|k| k as f64).collect();
        let (t, c) = (l.target().rows(), l.target().last_dim());
        let data: Vec<f64> = l.dists.iter().flat_map(|d| d.data().iter().copied()).collect();
        let p = format!("pseudo.{}", l.id);
        entries.push(Entry::f32(format!("{p}.classes"), Tensor::new(vec![classes.len()], classes)?));
        entries.push(Entry::f64(format!("{p}.length"), Tensor::scalar(l.length as f64)));
        entries.push(Entry::f64(format!("{p}.certainty"), Tensor::scalar(l.certainty)));
        entries.push(Entry::f32(format!("{p}.dists"), Tensor::new(vec![l.dists.len(), t, c], data)?));
    }
    write_entries(path, &entries)
}

pub fn load_pseudo_cache(path: &Path, pipeline: &Pipeline) -> Result<Vec<PseudoLabel>> {
    let cs = pipeline.charset();
    let entries = read_entries(path)?;
    let bad = |what: &str| Error::Checkpoint(format!("pseudo cache: {what}"));
    entries
        .chunks(4)
        .map(|ch| {
            let [classes, length, cert, dists] = ch else {
                return Err(bad("incomplete record"));
            };
            let id: usize = classes
                .name
                .strip_prefix("pseudo.")
                .and_then(|r| r.strip_suffix(".classes"))
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| bad(&format!("unexpected entry `{}`", classes.name)))?;
            let idx: Vec<usize> = classes.tensor.data().iter().map(|&v| v as usize).collect();
            let s = dists.tensor.shape();
            if s.len() != 3 {
                return Err(bad("distributions must be [M, T, c]"));
            }
            let per = s[1] * s[2];
            let dists = (0..s[0])
                .map(|m| Tensor::new(vec![s[1], s[2]], dists.tensor.data()[m * per..(m + 1) * per].to_vec()))
                .collect::<Result<Vec<_>>>()?;
            Ok(PseudoLabel {
                id,
                text: cs.decode(&idx),
                dists,
                length: length.tensor.item() as usize,
                certainty: cert.tensor.item(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        let c = rows[0].len();
        Tensor::new(vec![rows.len(), c], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn one_hot_is_fully_certain() {
        let d = t(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
        assert_eq!(certainty(&[d.clone(), d], CertaintyRule::Entropy).unwrap(), 1.0);
    }

    #[test]
    fn uniform_gives_inverse_class_count() {
        for k in [2usize, 5, 38] {
            let d = Tensor::full(&[1, k], 1.0 / k as f64);
            let c = certainty(&[d], CertaintyRule::Entropy).unwrap();
            assert!((c - 1.0 / k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn unnormalized_rows_are_rejected() {
        let d = t(&[&[0.5, 0.6]]);
        assert!(matches!(certainty(&[d], CertaintyRule::Entropy), Err(Error::NotNormalized { .. })));
    }

    #[test]
    fn max_prob_rule() {
        let a = t(&[&[0.9, 0.1], &[0.5, 0.5]]);
        let b = t(&[&[0.6, 0.4], &[0.8, 0.2]]);
        assert!((certainty(&[a, b], CertaintyRule::MaxProb).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        let ok = SelfTrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SelfTrainConfig { threshold: 0.0, ..ok.clone() }.validate().is_err());
        assert!(SelfTrainConfig { threshold: 1.01, ..ok.clone() }.validate().is_err());
        assert!(SelfTrainConfig { refresh_step: 1000, ..ok }.validate().is_err());
    }
}
