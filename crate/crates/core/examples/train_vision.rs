//! Trains the vision model alone on rendered words and prints a few
//! readings of held-out renders.
//!
//! ```text
//! cargo run --release --example train_vision -- [steps] [seed]
//! ```

use std::time::Instant;

use clozeread::rng::SeedTree;
use clozeread::textdata::embedded_words;
use clozeread::vision::data::render_set;
use clozeread::vision::{evaluate_vision, train_vision, NoiseParams, SmnVariant, VisionConfig, VisionTrainConfig, VmModel};

fn main() -> clozeread::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (steps, seed) = (arg(1, 600), arg(2, 1) as u64);
    let (test, train): (Vec<_>, Vec<_>) = embedded_words(4, 8).into_iter().enumerate().partition(|(i, _)| i % 10 == 0);
    let train: Vec<String> = train.into_iter().map(|x| x.1).collect();
    let test: Vec<String> = test.into_iter().map(|x| x.1).take(300).collect();

    let cfg = VisionConfig {
        smn: SmnVariant::Conv,
        smn_layers: 2,
        ..VisionConfig::default()
    };
    let mut model = VmModel::new(&cfg, seed)?;
    let tc = VisionTrainConfig {
        steps,
        ..Default::default()
    };
    let t0 = Instant::now();
    let losses = train_vision(&mut model, &train, &tc, &SeedTree::new(seed))?;
    println!(
        "{} params, {steps} steps in {:.0}s, loss {:.3} -> {:.3}",
        model.store.scalar_count(),
        t0.elapsed().as_secs_f64(),
        losses[0],
        losses.last().copied().unwrap_or(f64::NAN)
    );
    for (name, noise) in [("clean", NoiseParams::clean()), ("moderate", NoiseParams::moderate())] {
        let imgs = render_set(&test, cfg.t_max, &noise, &SeedTree::new(9))?;
        let scores = evaluate_vision(&model, &imgs)?;
        let s = scores.last().expect("one score per attention round");
        println!("{name}: word {:.3}, char {:.3}", s.word_accuracy, s.char_accuracy);
        for (img, p) in imgs.iter().zip(model.predict(&imgs[..6])?) {
            println!("  {:<10} -> {}", img.text, p.decode(model.vm.charset()));
        }
    }
    Ok(())
}
