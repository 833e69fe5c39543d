//! Trains a pipeline, then fine-tunes two copies of it for the same number
//! of steps: one on labeled words only, one with confident pseudo labels of
//! unlabeled renders of unseen words.
//!
//! ```text
//! cargo run --release --example self_training -- [seed] [threshold] [steps]
//! ```

use clozeread::fusion::{evaluate_pipeline, train_supervised, Pipeline, PipelineConfig, TrainConfig};
use clozeread::lm::{pretrain_lm, LmModel, PretrainConfig};
use clozeread::rng::SeedTree;
use clozeread::selftrain::{self_train, SelfTrainConfig};
use clozeread::textdata::embedded_words;
use clozeread::vision::data::render_set;
use clozeread::vision::NoiseParams;

fn main() -> clozeread::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let threshold: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.9);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(300);
    let seeds = SeedTree::new(seed);

    let mut words = embedded_words(4, 8);
    let unseen: Vec<String> = words.split_off(2000).into_iter().take(500).collect();
    let (test, train): (Vec<_>, Vec<_>) = words.iter().cloned().enumerate().partition(|(i, _)| i % 10 == 0);
    let train: Vec<String> = train.into_iter().map(|x| x.1).collect();
    let test: Vec<String> = test.into_iter().map(|x| x.1).collect();

    let cfg = PipelineConfig::default();
    let mut lm = LmModel::new(&cfg.lm, seed)?;
    let pc = PretrainConfig {
        steps: 3000,
        lr: 3e-3,
        ..PretrainConfig::default()
    };
    pretrain_lm(&mut lm, &words, &pc, &seeds.child("lm"))?;
    let mut warm = Pipeline::new(&cfg, seed)?;
    warm.load_lm(&lm)?;
    let tc = TrainConfig::default();
    train_supervised(&mut warm, &train, &tc, &seeds.child("train"), |_| {})?;

    let unlabeled = render_set(&unseen, cfg.vision.t_max, &tc.noise, &seeds.child("unlabeled"))?;
    let noisy = render_set(&test, cfg.vision.t_max, &NoiseParams::moderate(), &seeds.child("noisy"))?;
    let score = |p: &Pipeline| evaluate_pipeline(p, &noisy, tc.iters).map(|s| s.final_fused().word_accuracy);
    println!("warm start: noisy word accuracy {:.3}", score(&warm)?);

    let st = SelfTrainConfig {
        threshold,
        max_steps: steps,
        refresh_step: steps / 2,
        ..SelfTrainConfig::default()
    };
    let mut supervised = warm.clone();
    self_train(&mut supervised, &train, &[], &st, &tc, &seeds.child("self"), |_| {})?;
    let mut pseudo = warm;
    let report = self_train(&mut pseudo, &train, &unlabeled, &st, &tc, &seeds.child("self"), |_| {})?;
    for r in &report.retention {
        println!("step {:>4}: {} of {} pseudo labels pass Q = {threshold}", r.step, r.retained, r.total);
    }
    let (a, b) = (score(&supervised)?, score(&pseudo)?);
    println!("after {steps} steps: labeled only {a:.3}, with pseudo labels {b:.3}, delta {:+.1} points", 100.0 * (b - a));
    Ok(())
}
