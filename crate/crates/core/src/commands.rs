//! Reproducible experiment commands driven by one TOML run configuration.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_store, read_sidecar, save_store};
use crate::error::{Error, Result};
use crate::fusion::{evaluate_pipeline, new_optimizer, train_supervised_range, Pipeline, PipelineConfig, PipelineScores, TrainConfig};
use crate::gradsuite::{run_suite, CaseResult};
use crate::lm::prob::{predicted_length, softmax_rows};
use crate::lm::{cloze_accuracy, evaluate_spelling, pretrain_lm, ClozeAccuracy, LmConfig, LmModel, PretrainConfig};
use crate::numerics::{Tape, Tensor};
use crate::rng::SeedTree;
use crate::selftrain::{generate_pseudo_labels, save_pseudo_cache, self_train, Retention, SelfTrainConfig};
use crate::textdata::{
    make_spelling_benchmark, parse_corpus, load_corpus, BenchItem, BenchRatios, CorpusOptions, Metrics, SpellingBenchmark,
    CHAR_ACCURACY_DEFINITION, EMBEDDED_WORDS,
};
use crate::vision::data::render_set;
use crate::vision::{heat_raster, image_batch, render_text, write_pgm, GlyphImage, NoiseParams, RecognitionScore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Word list, one instance per line. The bundled list when absent.
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
    /// Pretrained language model used to warm-start `train` and scored by
    /// `eval-spelling`.
    pub lm_checkpoint: Option<PathBuf>,
    /// Causal baseline scored next to `lm_checkpoint` by `eval-spelling`.
    pub causal_checkpoint: Option<PathBuf>,
    /// Trained pipeline used by `self-train` and `render-demo`.
    pub pipeline_checkpoint: Option<PathBuf>,
    /// Tab-separated spelling benchmark; generated when absent.
    pub benchmark: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: None,
            out: PathBuf::from("runs/default"),
            lm_checkpoint: None,
            causal_checkpoint: None,
            pipeline_checkpoint: None,
            benchmark: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub min_len: usize,
    pub max_len: usize,
    /// Words taken from the corpus as the labeled vocabulary.
    pub vocab: usize,
    /// Every `test_every`-th vocabulary word is held out for evaluation.
    pub test_every: usize,
    /// Words after the vocabulary rendered as unlabeled images.
    pub unlabeled: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            min_len: 4,
            max_len: 8,
            vocab: 2000,
            test_every: 10,
            unlabeled: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out words rendered for evaluation.
    pub test_words: usize,
    /// Steps between evaluations and checkpoints; 0 evaluates at the end only.
    pub every: usize,
    pub noise: NoiseParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_words: 200,
            every: 200,
            noise: NoiseParams::moderate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpellingConfig {
    pub items: usize,
    pub top_k: usize,
    pub ratios: BenchRatios,
    pub allow_replacement: bool,
}

impl Default for SpellingConfig {
    fn default() -> Self {
        Self {
            items: 2000,
            top_k: 5,
            ratios: BenchRatios::default(),
            allow_replacement: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub text: String,
    pub noise: NoiseParams,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            text: "reading".into(),
            noise: NoiseParams::moderate(),
        }
    }
}

/// Everything a command needs: seed, paths, data and module settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub model: PipelineConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub self_train: SelfTrainConfig,
    pub spelling: SpellingConfig,
    pub render: RenderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 1,
            paths: Paths::default(),
            data: DataConfig::default(),
            model: PipelineConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            self_train: SelfTrainConfig::default(),
            spelling: SpellingConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Rejects every inconsistency before any work starts, including
    /// referenced input files that do not exist.
    pub fn validate(&self) -> Result<()> {
        let p = &self.paths;
        for (key, path) in [
            ("corpus", &p.corpus),
            ("lm_checkpoint", &p.lm_checkpoint),
            ("causal_checkpoint", &p.causal_checkpoint),
            ("pipeline_checkpoint", &p.pipeline_checkpoint),
            ("benchmark", &p.benchmark),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(Error::Config(format!("paths.{key}: {} does not exist", path.display())));
                }
            }
        }
        let d = &self.data;
        if d.min_len < 2 || d.min_len > d.max_len || d.max_len > self.model.vision.t_max {
            return Err(Error::Config(format!(
                "word lengths {}..={} must satisfy 2 <= min <= max <= t_max ({})",
                d.min_len, d.max_len, self.model.vision.t_max
            )));
        }
        if d.vocab == 0 || d.test_every < 2 {
            return Err(Error::Config("data.vocab must be positive and data.test_every at least 2".into()));
        }
        if self.spelling.top_k == 0 || self.spelling.items == 0 {
            return Err(Error::Config("spelling.items and spelling.top_k must be positive".into()));
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.eval.noise.validate()?;
        self.render.noise.validate()?;
        self.self_train.validate()
    }

    fn out(&self, file: &str) -> PathBuf {
        self.paths.out.join(file)
    }
}

/// Named noise levels accepted on the command line.
pub fn noise_preset(name: &str) -> Result<NoiseParams> {
    match name {
        "clean" => Ok(NoiseParams::clean()),
        "moderate" => Ok(NoiseParams::moderate()),
        "heavy" => Ok(NoiseParams::heavy()),
        other => Err(Error::Config(format!("unknown noise level `{other}` (clean, moderate, heavy)"))),
    }
}

/// Vocabulary split used by every command.
#[derive(Clone, Debug, PartialEq)]
pub struct WordSets {
    /// Labeled vocabulary; also the language-model corpus.
    pub vocab: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Disjoint words whose renders are used without labels.
    pub unlabeled: Vec<String>,
}

impl WordSets {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let charset = cfg.model.lm.charset()?;
        let opts = CorpusOptions {
            dedup: true,
            t_max: cfg.data.max_len,
            min_len: cfg.data.min_len,
        };
        let corpus = match &cfg.paths.corpus {
            Some(path) => load_corpus(path, &charset, opts)?,
            None => parse_corpus(EMBEDDED_WORDS, &charset, opts)?,
        };
        if corpus.dropped_charset > 0 {
            log::info!("dropped {} corpus lines with unsupported symbols", corpus.dropped_charset);
        }
        let mut texts = corpus.texts;
        let rest = texts.split_off(cfg.data.vocab.min(texts.len()));
        let (test, train) = texts
            .iter()
            .enumerate()
            .partition::<Vec<_>, _>(|(i, _)| i % cfg.data.test_every == 0);
        let strip = |v: Vec<(usize, &String)>| v.into_iter().map(|(_, w)| w.clone()).collect::<Vec<_>>();
        Ok(Self {
            train: strip(train),
            test: strip(test),
            unlabeled: rest.into_iter().take(cfg.data.unlabeled).collect(),
            vocab: texts,
        })
    }
}

/// Line-delimited JSON records.
pub struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        writeln!(self.out).map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Sidecar written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta<C> {
    pub kind: String,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub seed: u64,
    pub config: C,
}

fn read_meta<C: DeserializeOwned>(path: &Path, kind: &str) -> Result<CheckpointMeta<C>> {
    let meta: CheckpointMeta<C> = read_sidecar(path)?;
    if meta.kind != kind {
        return Err(Error::Checkpoint(format!("{} holds a `{}`, expected `{kind}`", path.display(), meta.kind)));
    }
    Ok(meta)
}

/// Rebuilds a language model from a checkpoint written by
/// [`cmd_pretrain_lm`].
pub fn load_lm_checkpoint(path: &Path) -> Result<LmModel> {
    let meta: CheckpointMeta<LmConfig> = read_meta(path, "lm")?;
    let mut model = LmModel::new(&meta.config, meta.seed)?;
    model.store.load_exact(&load_store(path)?.params)?;
    Ok(model)
}

/// Rebuilds a pipeline from a checkpoint written by [`cmd_train`] or
/// [`cmd_self_train`].
pub fn load_pipeline_checkpoint(path: &Path) -> Result<(Pipeline, CheckpointMeta<PipelineConfig>)> {
    let meta: CheckpointMeta<PipelineConfig> = read_meta(path, "pipeline")?;
    let mut p = Pipeline::new(&meta.config, meta.seed)?;
    p.store.load_exact(&load_store(path)?.params)?;
    Ok((p, meta))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct LossRecord {
    step: usize,
    loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub final_loss: f64,
    pub cloze: ClozeAccuracy,
}

/// Pretrains the configured language model as a spelling corrector on the
/// vocabulary and reports cloze accuracy on the held-out words.
pub fn cmd_pretrain_lm(cfg: &RunConfig) -> Result<PretrainSummary> {
    cfg.validate()?;
    let words = WordSets::load(cfg)?;
    let seeds = SeedTree::new(cfg.seed);
    let mut lm = LmModel::new(&cfg.model.lm, cfg.seed)?;
    let report = pretrain_lm(&mut lm, &words.vocab, &cfg.pretrain, &seeds.child("lm"))?;
    let mut log = MetricsLog::create(&cfg.out("pretrain_lm.jsonl"), false)?;
    for (step, &loss) in report.losses.iter().enumerate() {
        log.write(&LossRecord { step, loss })?;
    }
    let checkpoint = cfg.out("lm.ckpt");
    let meta = CheckpointMeta {
        kind: "lm".into(),
        step: report.losses.len(),
        seed: cfg.seed,
        config: cfg.model.lm.clone(),
    };
    save_store(&checkpoint, &lm.store, None, &meta)?;
    let cloze = cloze_accuracy(&lm, &words.test)?;
    let summary = PretrainSummary {
        checkpoint,
        steps: report.losses.len(),
        final_loss: report.losses.last().copied().unwrap_or(f64::NAN),
        cloze,
    };
    println!(
        "pretrained {:?} language model for {} steps in {:.1}s; final loss {:.4}",
        cfg.model.lm.variant, summary.steps, report.wall_seconds, summary.final_loss
    );
    println!("cloze accuracy on {} held-out words: position {:.4}, word {:.4}", words.test.len(), cloze.position, cloze.word);
    Ok(summary)
}

/// Accuracies of one evaluation split, one column per correction round.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    pub split: String,
    pub vision: f64,
    pub lm: Vec<f64>,
    pub fused: Vec<f64>,
}

impl EvalRecord {
    fn new(step: usize, split: &str, s: &PipelineScores) -> Self {
        let word = |v: &[RecognitionScore]| v.iter().map(|x| x.word_accuracy).collect();
        Self {
            step,
            split: split.into(),
            vision: s.vision.word_accuracy,
            lm: word(&s.lm),
            fused: word(&s.fused),
        }
    }

    fn print(&self) {
        let cols = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
        println!(
            "step {:>6} {:<6} vision {:.3} | lm {} | fused {}",
            self.step,
            self.split,
            self.vision,
            cols(&self.lm),
            cols(&self.fused)
        );
    }
}

fn eval_sets(cfg: &RunConfig, words: &WordSets) -> Result<Vec<(&'static str, Vec<GlyphImage>)>> {
    let test = &words.test[..cfg.eval.test_words.min(words.test.len())];
    let seeds = SeedTree::new(cfg.seed).child("eval");
    let t_max = cfg.model.vision.t_max;
    Ok(vec![
        ("clean", render_set(test, t_max, &NoiseParams::clean(), &seeds.child("clean"))?),
        ("noisy", render_set(test, t_max, &cfg.eval.noise, &seeds.child("noisy"))?),
    ])
}

fn evaluate_all(p: &Pipeline, sets: &[(&str, Vec<GlyphImage>)], iters: usize, step: usize) -> Result<Vec<EvalRecord>> {
    sets.iter()
        .map(|(name, imgs)| Ok(EvalRecord::new(step, name, &evaluate_pipeline(p, imgs, iters)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    /// Step counter after training, including resumed steps.
    pub step: usize,
    pub evals: Vec<EvalRecord>,
}

/// Trains the whole pipeline on rendered vocabulary words, warm-starting the
/// language model from `paths.lm_checkpoint` when given. With `resume`, the
/// run continues from the checkpoint in the output directory, including
/// its optimizer state and step counter.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let words = WordSets::load(cfg)?;
    let checkpoint = cfg.out("pipeline.ckpt");
    let mut p = Pipeline::new(&cfg.model, cfg.seed)?;
    let mut adam = new_optimizer(&cfg.train);
    let mut start = 0;
    if resume {
        if !checkpoint.exists() {
            return Err(Error::Config(format!("--resume: no checkpoint at {}", checkpoint.display())));
        }
        let meta: CheckpointMeta<PipelineConfig> = read_meta(&checkpoint, "pipeline")?;
        if meta.config != cfg.model {
            return Err(Error::Config("resumed checkpoint was trained with a different model configuration".into()));
        }
        let loaded = load_store(&checkpoint)?;
        p.store.load_exact(&loaded.params)?;
        loaded.restore_optimizer(&p.store, &mut adam)?;
        start = meta.step;
        println!("resuming from step {start}");
    } else if let Some(path) = &cfg.paths.lm_checkpoint {
        let lm = load_lm_checkpoint(path)?;
        p.load_lm(&lm)?;
        println!("language model warm-started from {}", path.display());
    }
    let sets = eval_sets(cfg, &words)?;
    let mut log = MetricsLog::create(&cfg.out("train.jsonl"), resume)?;
    let seeds = SeedTree::new(cfg.seed).child("train");
    let total = cfg.train.steps;
    let every = if cfg.eval.every == 0 { total.max(1) } else { cfg.eval.every };
    let mut evals = Vec::new();
    let mut step = start;
    while step < total {
        let end = (step + every - every.min(step % every)).min(total).max(step + 1);
        let mut err = None;
        train_supervised_range(&mut p, &mut adam, &words.train, &cfg.train, &seeds, step..end, |r| {
            if let Err(e) = log.write(r) {
                err.get_or_insert(e);
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        step = end;
        let meta = CheckpointMeta {
            kind: "pipeline".into(),
            step,
            seed: cfg.seed,
            config: cfg.model.clone(),
        };
        save_store(&checkpoint, &p.store, Some(&adam), &meta)?;
        for rec in evaluate_all(&p, &sets, cfg.train.iters, step)? {
            rec.print();
            log.write(&rec)?;
            evals.push(rec);
        }
    }
    Ok(TrainSummary { checkpoint, step, evals })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpellingRow {
    pub model: String,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpellingSummary {
    pub items: usize,
    pub rows: Vec<SpellingRow>,
    /// Top-k word-accuracy difference of the first model over the second
    /// and the half-width of its 95% normal-approximation interval.
    pub gap: Option<(f64, f64)>,
}

fn benchmark(cfg: &RunConfig, words: &WordSets) -> Result<Vec<BenchItem>> {
    if let Some(path) = &cfg.paths.benchmark {
        return SpellingBenchmark::read_tsv(path);
    }
    let bench = make_spelling_benchmark(
        &words.vocab,
        cfg.spelling.items,
        cfg.spelling.ratios,
        cfg.seed,
        &cfg.model.lm.charset()?,
        cfg.model.lm.t_max,
        cfg.spelling.allow_replacement,
    )?;
    fs::create_dir_all(&cfg.paths.out).map_err(|e| Error::io(&cfg.paths.out, e))?;
    bench.write_tsv(&cfg.out("spelling_benchmark.tsv"))?;
    Ok(bench.items)
}

/// Scores `paths.lm_checkpoint` and, when given, `paths.causal_checkpoint`
/// on a spelling-correction benchmark.
pub fn cmd_eval_spelling(cfg: &RunConfig) -> Result<SpellingSummary> {
    cfg.validate()?;
    let bcn = cfg
        .paths
        .lm_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("eval-spelling needs paths.lm_checkpoint".into()))?;
    let words = WordSets::load(cfg)?;
    let items = benchmark(cfg, &words)?;
    let mut models = vec![bcn.clone()];
    models.extend(cfg.paths.causal_checkpoint.clone());
    let mut log = MetricsLog::create(&cfg.out("spelling.jsonl"), false)?;
    let k = cfg.spelling.top_k;
    println!("# {CHAR_ACCURACY_DEFINITION}");
    println!("# word accuracy: any of the top {k} candidates equals the reference");
    println!("{:<10} {:>9} {:>9} {:>9}   ed 0/1/2/3+", "model", "char", "top-1", format!("top-{k}"));
    let mut rows = Vec::new();
    for path in models {
        let model = load_lm_checkpoint(&path)?;
        let metrics = evaluate_spelling(&model, &items, k)?;
        let name = format!("{:?}", model.config().variant).to_lowercase();
        let h = metrics.ed_histogram;
        println!(
            "{name:<10} {:>9.4} {:>9.4} {:>9.4}   {}/{}/{}/{}",
            metrics.char_accuracy,
            metrics.top1(),
            metrics.word_accuracy(),
            h[0],
            h[1],
            h[2],
            h[3]
        );
        let row = SpellingRow { model: name, metrics };
        log.write(&row)?;
        rows.push(row);
    }
    let gap = (rows.len() == 2).then(|| {
        let (a, b) = (rows[0].metrics.word_accuracy(), rows[1].metrics.word_accuracy());
        let n = items.len() as f64;
        let half = 1.96 * ((a * (1.0 - a) + b * (1.0 - b)) / n).sqrt();
        println!("top-{k} word accuracy gap {:+.4} ± {half:.4} (95%, n = {}, seed {})", a - b, items.len(), cfg.seed);
        (a - b, half)
    });
    Ok(SpellingSummary {
        items: items.len(),
        rows,
        gap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfTrainSummary {
    pub checkpoint: PathBuf,
    pub retention: Vec<Retention>,
    pub labeled_only: bool,
    pub before: Vec<EvalRecord>,
    pub after: Vec<EvalRecord>,
}

/// Fine-tunes `paths.pipeline_checkpoint` with pseudo labels of unlabeled
/// renders of words outside the vocabulary.
pub fn cmd_self_train(cfg: &RunConfig) -> Result<SelfTrainSummary> {
    cfg.validate()?;
    let warm = cfg
        .paths
        .pipeline_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("self-train needs paths.pipeline_checkpoint".into()))?;
    let words = WordSets::load(cfg)?;
    let (mut p, meta) = load_pipeline_checkpoint(warm)?;
    let seeds = SeedTree::new(cfg.seed).child("self_train");
    let t_max = p.config().vision.t_max;
    let unlabeled = render_set(&words.unlabeled, t_max, &cfg.train.noise, &seeds.child("unlabeled"))?;
    let sets = eval_sets(cfg, &words)?;
    let iters = cfg.train.iters;
    let before = evaluate_all(&p, &sets, iters, meta.step)?;
    before.iter().for_each(EvalRecord::print);
    let mut log = MetricsLog::create(&cfg.out("self_train.jsonl"), false)?;
    let mut err = None;
    let report = self_train(&mut p, &words.train, &unlabeled, &cfg.self_train, &cfg.train, &seeds, |r| {
        if let Err(e) = log.write(r) {
            err.get_or_insert(e);
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    for r in &report.retention {
        println!("step {:>6}: retained {} of {} pseudo labels ({:.1}%)", r.step, r.retained, r.total, 100.0 * r.rate());
        log.write(r)?;
    }
    if report.labeled_only {
        println!("warning: some steps trained on labeled data only");
    }
    let step = meta.step + cfg.self_train.max_steps;
    let after = evaluate_all(&p, &sets, iters, step)?;
    for rec in &after {
        rec.print();
        log.write(rec)?;
    }
    let labels = generate_pseudo_labels(&p, &unlabeled, iters, cfg.self_train.rule)?;
    let kept: Vec<_> = labels.into_iter().filter(|l| l.certainty >= cfg.self_train.threshold).collect();
    save_pseudo_cache(&cfg.out("pseudo_labels.bin"), &kept, &p)?;
    let checkpoint = cfg.out("self_train.ckpt");
    let meta = CheckpointMeta {
        kind: "pipeline".into(),
        step,
        seed: meta.seed,
        config: meta.config,
    };
    save_store(&checkpoint, &p.store, None, &meta)?;
    Ok(SelfTrainSummary {
        checkpoint,
        retention: report.retention,
        labeled_only: report.labeled_only,
        before,
        after,
    })
}

/// Runs the gradient suite over `seeds` seeds and prints one row per case.
pub fn cmd_gradcheck(seeds: u64) -> Result<Vec<CaseResult>> {
    let results = run_suite(seeds)?;
    println!("{:<24} {:>6} {:>12} {:>8}", "case", "seeds", "max rel err", "seconds");
    for r in &results {
        let mark = if r.passed() { "pass" } else { "FAIL" };
        println!("{:<24} {:>6} {:>12.3e} {:>8.2}  {mark}", r.name, r.seeds, r.max_rel_err, r.seconds);
    }
    Ok(results)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RenderSummary {
    pub image: PathBuf,
    pub heatmaps: Vec<PathBuf>,
}

/// Renders `text` to `render.pgm`; with `paths.pipeline_checkpoint`, also
/// writes one canvas-sized attention heatmap per predicted position,
/// end marker included.
pub fn cmd_render_demo(cfg: &RunConfig, text: &str, noise: &NoiseParams) -> Result<RenderSummary> {
    cfg.validate()?;
    let t_max = match &cfg.paths.pipeline_checkpoint {
        Some(path) => read_meta::<PipelineConfig>(path, "pipeline")?.config.vision.t_max,
        None => cfg.model.vision.t_max,
    };
    let img = render_text(text, t_max, noise, SeedTree::new(cfg.seed).child("render").seed())?;
    fs::create_dir_all(&cfg.paths.out).map_err(|e| Error::io(&cfg.paths.out, e))?;
    let image = cfg.out("render.pgm");
    img.write_pgm(&image)?;
    println!("wrote {}", image.display());
    let mut heatmaps = Vec::new();
    if let Some(path) = &cfg.paths.pipeline_checkpoint {
        let (p, _) = load_pipeline_checkpoint(path)?;
        let mut tape = Tape::with_params(&p.store);
        let x = tape.constant(image_batch(std::slice::from_ref(&img))?);
        let out = p.vm.forward(&mut tape, x)?;
        let probs = softmax_rows(tape.value(out.last_logits()));
        let t = p.seq_len();
        let c = probs.last_dim();
        let first = Tensor::new(vec![t, c], probs.data()[..t * c].to_vec())?;
        let length = predicted_length(&first, p.charset().eos(), 1);
        let maps = tape.value(out.maps);
        let (fh, fw) = p.config().vision.feature_hw();
        let (h, w) = p.config().vision.canvas();
        for pos in 0..length {
            let n = fh * fw;
            let raster = heat_raster(&maps.data()[pos * n..(pos + 1) * n], fh, fw, h, w);
            let file = cfg.out(&format!("attention_{pos:02}.pgm"));
            write_pgm(&file, w, h, &raster)?;
            heatmaps.push(file);
        }
        let decoded = crate::fusion::decode_batch(p.charset(), tape.value(out.last_logits()));
        println!("vision reads {:?}; wrote {} attention maps", decoded[0], heatmaps.len());
    }
    Ok(RenderSummary { image, heatmaps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn bad_probabilities_are_rejected_before_work() {
        let mut cfg = RunConfig::default();
        cfg.pretrain.aug.p_unchanged = 0.5;
        assert!(cfg.validate().unwrap_err().is_usage());
    }

    #[test]
    fn missing_corpus_is_a_usage_error() {
        let mut cfg = RunConfig::default();
        cfg.paths.corpus = Some(PathBuf::from("/nonexistent/words.txt"));
        let err = cmd_pretrain_lm(&cfg).unwrap_err();
        assert!(err.is_usage(), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sede = 3").is_err());
    }

    #[test]
    fn word_sets_are_disjoint() {
        let w = WordSets::load(&RunConfig::default()).unwrap();
        assert_eq!(w.train.len() + w.test.len(), w.vocab.len());
        assert!(w.unlabeled.iter().all(|u| !w.vocab.contains(u)));
        assert!(w.test.iter().all(|t| !w.train.contains(t)));
    }
}
