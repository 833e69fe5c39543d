use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::lm::prob::{argmax_rows, predicted_lengths, softmax_rows, target_batch};
use crate::lm::{Charset, LanguageModel, LmConfig, LmModel};
use crate::nn::BlockConfig;
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::parallel::map_chunks;
use crate::rng::SeedTree;
use crate::vision::{image_batch, GlyphImage, VisionConfig, VisionModel, VisionOutput, VmModel};

/// Architecture of the full recognizer. Vision and language halves must
/// agree on feature width, maximum length and symbols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub vision: VisionConfig,
    pub lm: LmConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let vision = VisionConfig::default();
        let lm = LmConfig {
            layers: 2,
            block: BlockConfig::new(vision.d, vision.heads).without_dropout(),
            t_max: vision.t_max,
            symbols: vision.symbols.clone(),
            ..LmConfig::default()
        };
        Self { vision, lm }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.lm.validate()?;
        if self.vision.d != self.lm.block.d {
            return Err(Error::Config(format!(
                "vision width {} differs from language width {}",
                self.vision.d, self.lm.block.d
            )));
        }
        if self.vision.t_max != self.lm.t_max {
            return Err(Error::Config(format!(
                "vision t_max {} differs from language t_max {}",
                self.vision.t_max, self.lm.t_max
            )));
        }
        if self.vision.symbols != self.lm.symbols {
            return Err(Error::Config("vision and language symbol sets differ".into()));
        }
        Ok(())
    }
}

/// Vision model, language model and fusion sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub store: ParamStore,
    pub vm: VisionModel,
    pub lm: LanguageModel,
    pub fusion: Fusion,
    cfg: PipelineConfig,
}

/// One pass of the language model and the fusion gate.
#[derive(Clone, Debug)]
pub struct CorrectionStep {
    /// Detached distributions fed to the language model.
    pub lm_input: Var,
    /// Padding lengths used by this pass.
    pub lengths: Vec<usize>,
    pub lm_logits: Var,
    pub gate: Var,
    pub fused_logits: Var,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub vision: VisionOutput,
    pub steps: Vec<CorrectionStep>,
}

impl Pipeline {
    pub const FUSION_PREFIX: &'static str = "fusion";

    pub fn new(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let seeds = SeedTree::new(seed);
        let mut store = ParamStore::new();
        let vm = VisionModel::new(&mut store, VmModel::PREFIX, &cfg.vision, &mut seeds.rng("vm.init"))?;
        let lm = LanguageModel::new(&mut store, LmModel::PREFIX, &cfg.lm, &mut seeds.rng("lm.init"))?;
        let classes = vm.charset().num_classes();
        let fusion = Fusion::new(&mut store, Self::FUSION_PREFIX, cfg.vision.d, classes, &mut seeds.rng("fusion.init"));
        Ok(Self {
            store,
            vm,
            lm,
            fusion,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn charset(&self) -> &Charset {
        self.vm.charset()
    }

    pub fn seq_len(&self) -> usize {
        self.cfg.vision.seq_len()
    }

    fn load_component(&mut self, src: &ParamStore, prefix: &str) -> Result<usize> {
        let key = format!("{prefix}.");
        let wanted = self.store.iter().filter(|(n, _)| n.starts_with(&key)).count();
        let loaded = self.store.load_matching(src, &key, &key)?;
        if loaded != wanted {
            return Err(Error::Checkpoint(format!(
                "warm start for `{prefix}` filled {loaded} of {wanted} tensors"
            )));
        }
        Ok(loaded)
    }

    /// Copies a pretrained language model into the pipeline.
    pub fn load_lm(&mut self, lm: &LmModel) -> Result<usize> {
        self.load_component(&lm.store, LmModel::PREFIX)
    }

    /// Copies a pretrained vision model into the pipeline.
    pub fn load_vm(&mut self, vm: &VmModel) -> Result<usize> {
        self.load_component(&vm.store, VmModel::PREFIX)
    }

    /// Vision pass followed by `iters` rounds of language correction and
    /// fusion. `images: [B, 16, 8 * t_max, 1]`.
    pub fn forward(&self, tape: &mut Tape, images: Var, iters: usize) -> Result<PipelineOutput> {
        let vision = self.vm.forward(tape, images)?;
        let probs = softmax_rows(tape.value(vision.last_logits()));
        let steps = self.iterative_correct(tape, vision.last_features(), probs, iters)?;
        Ok(PipelineOutput { vision, steps })
    }

    /// Feeds `vision_probs` to the language model, fuses its features with
    /// `fv` and repeats with the softmax of the fused logits. The padding
    /// mask of every round follows the current predicted lengths.
    pub fn iterative_correct(&self, tape: &mut Tape, fv: Var, vision_probs: Tensor, iters: usize) -> Result<Vec<CorrectionStep>> {
        self.correct(tape, fv, vision_probs, iters, None)
    }

    /// Like [`Pipeline::forward`], but round `i` reads `lm_inputs[i]` instead
    /// of the detached distributions it would compute. Replaying the inputs
    /// of an earlier pass makes the loss a smooth function of the parameters.
    pub fn forward_with_inputs(&self, tape: &mut Tape, images: Var, lm_inputs: &[Tensor]) -> Result<PipelineOutput> {
        let first = lm_inputs
            .first()
            .ok_or_else(|| Error::Config("at least one correction iteration is required".into()))?;
        let vision = self.vm.forward(tape, images)?;
        let steps = self.correct(tape, vision.last_features(), first.clone(), lm_inputs.len(), Some(lm_inputs))?;
        Ok(PipelineOutput { vision, steps })
    }

    fn correct(&self, tape: &mut Tape, fv: Var, first: Tensor, iters: usize, pinned: Option<&[Tensor]>) -> Result<Vec<CorrectionStep>> {
        if iters == 0 {
            return Err(Error::Config("at least one correction iteration is required".into()));
        }
        let eos = self.charset().eos();
        let mut probs = first;
        let mut steps = Vec::with_capacity(iters);
        for i in 0..iters {
            if let Some(p) = pinned {
                probs = p[i].clone();
            }
            let lengths = predicted_lengths(&probs, eos, 2)?;
            let x = tape.constant(probs);
            let lm = self.lm.forward(tape, x, &lengths)?;
            let fused = self.fusion.forward(tape, fv, lm.features)?;
            probs = softmax_rows(tape.value(fused.logits));
            steps.push(CorrectionStep {
                lm_input: x,
                lengths,
                lm_logits: lm.logits,
                gate: fused.gate,
                fused_logits: fused.logits,
            });
        }
        Ok(steps)
    }

    /// Runs the pipeline on `images` in chunks and records every iteration.
    pub fn trace(&self, images: &[GlyphImage], iters: usize) -> Result<IterationTrace> {
        let parts = map_chunks(images, 32, |chunk| {
            let mut tape = Tape::with_params(&self.store);
            let x = tape.constant(image_batch(chunk)?);
            let out = self.forward(&mut tape, x, iters)?;
            let vision = tape.value(out.vision.last_logits()).clone();
            let steps: Vec<(Tensor, Tensor, Vec<usize>)> = out
                .steps
                .iter()
                .map(|s| (tape.value(s.lm_logits).clone(), tape.value(s.fused_logits).clone(), s.lengths.clone()))
                .collect();
            Ok((vision, steps))
        })?;
        let cs = self.charset();
        let vision_logits = concat_batch(parts.iter().map(|p| &p.0))?;
        let steps = (0..iters)
            .map(|i| -> Result<TraceStep> {
                let lm_logits = concat_batch(parts.iter().map(|p| &p.1[i].0))?;
                let fused_logits = concat_batch(parts.iter().map(|p| &p.1[i].1))?;
                Ok(TraceStep {
                    lm_texts: decode_batch(cs, &lm_logits),
                    fused_texts: decode_batch(cs, &fused_logits),
                    lengths: parts.iter().flat_map(|p| p.1[i].2.iter().copied()).collect(),
                    lm_logits,
                    fused_logits,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(IterationTrace {
            vision_texts: decode_batch(cs, &vision_logits),
            vision_logits,
            steps,
        })
    }
}

/// Values of one correction round for a whole image set.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    /// `[N, T, c]`.
    pub lm_logits: Tensor,
    /// `[N, T, c]`.
    pub fused_logits: Tensor,
    pub lm_texts: Vec<String>,
    pub fused_texts: Vec<String>,
    pub lengths: Vec<usize>,
}

/// Intermediate predictions of iterative correction, one step per round.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationTrace {
    pub vision_logits: Tensor,
    pub vision_texts: Vec<String>,
    pub steps: Vec<TraceStep>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Final fused predictions.
    pub fn texts(&self) -> &[String] {
        self.steps.last().map_or(&self.vision_texts, |s| &s.fused_texts)
    }
}

/// Decodes the argmax of every instance of a `[B, T, c]` tensor.
pub fn decode_batch(charset: &Charset, logits: &Tensor) -> Vec<String> {
    let s = logits.shape();
    let t = s[1];
    argmax_rows(logits).chunks(t).map(|row| charset.decode(row)).collect()
}

/// Stacks `[B_i, ...]` tensors along the first axis.
pub fn concat_batch<'a>(parts: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    for p in parts {
        match &mut shape {
            None => shape = Some(p.shape().to_vec()),
            Some(s) => {
                if s[1..] != p.shape()[1..] {
                    return Err(Error::shape("concat_batch", s, p.shape()));
                }
                s[0] += p.shape()[0];
            }
        }
        data.extend_from_slice(p.data());
    }
    let shape = shape.ok_or_else(|| Error::Config("nothing to concatenate".into()))?;
    Tensor::new(shape, data)
}

/// Per-row target distributions `[B * T, c]` and the rows to skip.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    pub dist: Tensor,
    pub ignore: Vec<bool>,
}

impl LossTargets {
    /// One-hot targets of padded texts; rows after the end marker are
    /// ignored.
    pub fn from_texts(charset: &Charset, texts: &[String], t: usize) -> Result<Self> {
        let c = charset.num_classes();
        let (classes, ignore) = target_batch(charset, texts, t)?;
        let mut dist = vec![0.0; classes.len() * c];
        for (r, &k) in classes.iter().enumerate() {
            dist[r * c + k] = 1.0;
        }
        Ok(Self {
            dist: Tensor::new(vec![classes.len(), c], dist)?,
            ignore,
        })
    }

    /// Soft targets `[T, c]` per instance, each used up to its length.
    pub fn from_distributions(dists: &[(&Tensor, usize)]) -> Result<Self> {
        let c = dists.first().map_or(0, |(d, _)| d.last_dim());
        let mut data = Vec::new();
        let mut ignore = Vec::new();
        for (d, len) in dists {
            if d.last_dim() != c {
                return Err(Error::shape("soft targets", d.shape(), &[d.rows(), c]));
            }
            data.extend_from_slice(d.data());
            ignore.extend((0..d.rows()).map(|p| p >= *len));
        }
        Ok(Self {
            dist: Tensor::new(vec![ignore.len(), c], data)?,
            ignore,
        })
    }

    /// Appends the rows of `other`.
    pub fn concat(mut self, other: &LossTargets) -> Result<Self> {
        let dist = concat_batch([&self.dist, &other.dist])?;
        self.ignore.extend_from_slice(&other.ignore);
        Ok(Self { dist, ignore: self.ignore })
    }
}

/// Weighted loss and its unweighted terms.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// Vision loss summed over attention iterations.
    pub vision: Var,
    pub lm: Vec<Var>,
    pub fused: Vec<Var>,
}

/// `L = lambda_v L_v + lambda_l / M * sum L_l + 1 / M * sum L_f`.
pub fn total_loss(tape: &mut Tape, out: &PipelineOutput, targets: &LossTargets, lambda_v: f64, lambda_l: f64) -> Result<LossTerms> {
    if out.steps.is_empty() {
        return Err(Error::Config("the trace holds no correction iteration".into()));
    }
    let m = out.steps.len() as f64;
    let mut vision: Option<Var> = None;
    for &l in &out.vision.logits {
        let ce = tape.soft_cross_entropy(l, &targets.dist, &targets.ignore)?;
        vision = Some(match vision {
            Some(v) => tape.add(v, ce)?,
            None => ce,
        });
    }
    let vision = vision.ok_or(Error::EmptyMask)?;
    let mut lm = Vec::with_capacity(out.steps.len());
    let mut fused = Vec::with_capacity(out.steps.len());
    let mut total = tape.scale(vision, lambda_v);
    for step in &out.steps {
        let ll = tape.soft_cross_entropy(step.lm_logits, &targets.dist, &targets.ignore)?;
        let lf = tape.soft_cross_entropy(step.fused_logits, &targets.dist, &targets.ignore)?;
        let wl = tape.scale(ll, lambda_l / m);
        let wf = tape.scale(lf, 1.0 / m);
        total = tape.add(total, wl)?;
        total = tape.add(total, wf)?;
        lm.push(ll);
        fused.push(lf);
    }
    Ok(LossTerms { total, vision, lm, fused })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::{render_text, NoiseParams};

    fn tiny() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.vision.t_max = 4;
        cfg.vision.d = 16;
        cfg.vision.heads = 2;
        cfg.vision.channels = (4, 8);
        cfg.vision.unet.strides = vec![(2, 2), (2, 2), (1, 2)];
        cfg.lm.t_max = 4;
        cfg.lm.layers = 1;
        cfg.lm.block = BlockConfig::new(16, 2).without_dropout();
        cfg
    }

    fn images() -> Vec<GlyphImage> {
        ["ab", "cat", "dog1"]
            .iter()
            .enumerate()
            .map(|(i, w)| render_text(w, 4, &NoiseParams::moderate(), i as u64).unwrap())
            .collect()
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let mut cfg = tiny();
        cfg.lm.block = BlockConfig::new(32, 2);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn trace_has_one_step_per_iteration() {
        let p = Pipeline::new(&tiny(), 3).unwrap();
        for m in [1, 3] {
            let tr = p.trace(&images(), m).unwrap();
            assert_eq!(tr.len(), m);
            assert_eq!(tr.steps[0].fused_logits.shape(), &[3, 5, 38]);
            assert_eq!(tr.texts().len(), 3);
        }
    }

    #[test]
    fn trace_is_deterministic() {
        let p = Pipeline::new(&tiny(), 3).unwrap();
        assert_eq!(p.trace(&images(), 2).unwrap(), p.trace(&images(), 2).unwrap());
    }

    #[test]
    fn single_iteration_loss_decomposes() {
        let p = Pipeline::new(&tiny(), 5).unwrap();
        let imgs = images();
        let texts: Vec<String> = imgs.iter().map(|i| i.text.clone()).collect();
        let targets = LossTargets::from_texts(p.charset(), &texts, p.seq_len()).unwrap();
        let mut tape = Tape::with_params(&p.store);
        let x = tape.constant(image_batch(&imgs).unwrap());
        let out = p.forward(&mut tape, x, 1).unwrap();
        let terms = total_loss(&mut tape, &out, &targets, 0.7, 0.3).unwrap();
        let v = |t: &Tape, x: Var| t.value(x).item();
        let want = 0.7 * v(&tape, terms.vision) + 0.3 * v(&tape, terms.lm[0]) + v(&tape, terms.fused[0]);
        assert!((v(&tape, terms.total) - want).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_leave_mean_fused_loss() {
        let p = Pipeline::new(&tiny(), 5).unwrap();
        let imgs = images();
        let texts: Vec<String> = imgs.iter().map(|i| i.text.clone()).collect();
        let targets = LossTargets::from_texts(p.charset(), &texts, p.seq_len()).unwrap();
        let mut tape = Tape::with_params(&p.store);
        let x = tape.constant(image_batch(&imgs).unwrap());
        let out = p.forward(&mut tape, x, 3).unwrap();
        let terms = total_loss(&mut tape, &out, &targets, 0.0, 0.0).unwrap();
        let mean: f64 = terms.fused.iter().map(|&f| tape.value(f).item()).sum::<f64>() / 3.0;
        assert!((tape.value(terms.total).item() - mean).abs() < 1e-12);
    }
}
