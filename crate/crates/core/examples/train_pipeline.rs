//! Pretrains the language model, trains vision model, language model and
//! fusion jointly on rendered words, then scores every correction round on
//! clean and noisy held-out renders.
//!
//! ```text
//! cargo run --release --example train_pipeline -- [lm_steps] [steps] [seed] [vocab]
//! ```

use std::time::Instant;

use clozeread::fusion::{evaluate_pipeline, train_supervised, Pipeline, PipelineConfig, TrainConfig};
use clozeread::lm::{pretrain_lm, LmModel, PretrainConfig};
use clozeread::rng::SeedTree;
use clozeread::textdata::embedded_words;
use clozeread::vision::data::render_set;
use clozeread::vision::NoiseParams;

fn main() -> clozeread::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (lm_steps, steps, seed, vocab) = (arg(1, 3000), arg(2, 600), arg(3, 1) as u64, arg(4, 2000));
    let mut words = embedded_words(4, 8);
    words.truncate(vocab);
    let (test, train): (Vec<_>, Vec<_>) = words.iter().cloned().enumerate().partition(|(i, _)| i % 10 == 0);
    let train: Vec<String> = train.into_iter().map(|x| x.1).collect();
    let test: Vec<String> = test.into_iter().map(|x| x.1).take(200).collect();
    let cfg = PipelineConfig::default();
    let seeds = SeedTree::new(seed);

    let t0 = Instant::now();
    let mut lm = LmModel::new(&cfg.lm, seed)?;
    let pc = PretrainConfig {
        steps: lm_steps,
        lr: 3e-3,
        ..PretrainConfig::default()
    };
    let report = pretrain_lm(&mut lm, &words, &pc, &seeds.child("lm"))?;
    println!(
        "language model: {lm_steps} steps in {:.0}s, final loss {:.3}",
        t0.elapsed().as_secs_f64(),
        report.losses.last().copied().unwrap_or(f64::NAN)
    );

    let mut p = Pipeline::new(&cfg, seed)?;
    p.load_lm(&lm)?;
    let tc = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    train_supervised(&mut p, &train, &tc, &seeds.child("train"), |r| {
        if r.step % 100 == 0 {
            println!("step {:>4} loss {:.3}", r.step, r.loss);
        }
    })?;
    println!("pipeline: {} parameters, {steps} steps in {:.0}s", p.store.scalar_count(), t0.elapsed().as_secs_f64());

    let t_max = cfg.vision.t_max;
    for (name, noise) in [("clean", NoiseParams::clean()), ("noisy", NoiseParams::moderate())] {
        let imgs = render_set(&test, t_max, &noise, &seeds.child(name))?;
        let s = evaluate_pipeline(&p, &imgs, 4)?;
        let fmt = |v: Vec<f64>| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
        println!(
            "{name}: vision {:.3} | language model M=1..4 {} | fused M=1..4 {}",
            s.vision.word_accuracy,
            fmt(s.lm.iter().map(|x| x.word_accuracy).collect()),
            fmt(s.fused.iter().map(|x| x.word_accuracy).collect())
        );
    }
    Ok(())
}
