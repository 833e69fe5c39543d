//! Trains the vision model on rendered 32-48 character word chains with
//! plain position attention or with the high-resolution transformer and
//! content-refined attention, then scores each attention round.
//!
//! ```text
//! cargo run --release --example long_text -- [steps] [seed] [pa|pca_hfa] [batch] [lr]
//! ```

use std::time::Instant;

use clozeread::rng::SeedTree;
use clozeread::textdata::embedded_words;
use clozeread::vision::data::{render_set, word_chains};
use clozeread::vision::{evaluate_vision, train_vision, AttnMode, NoiseParams, SmnVariant, VisionConfig, VisionTrainConfig, VmModel};

fn main() -> clozeread::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (steps, seed, batch_size) = (arg(1, 1000), arg(2, 1) as u64, arg(4, 8));
    let mode = args.get(3).cloned().unwrap_or_else(|| "pa".into());
    let seeds = SeedTree::new(seed);
    let corpus = embedded_words(2, 10);
    let train = word_chains(4000, 32..=48, &corpus, &mut seeds.rng("train"));
    let test = word_chains(200, 32..=48, &corpus, &mut SeedTree::new(999).rng("test"));

    let mut cfg = VisionConfig {
        t_max: 48,
        smn: SmnVariant::Conv,
        smn_layers: 2,
        ..VisionConfig::default()
    };
    if mode.contains("hfa") {
        cfg.unet.hfa = true;
    }
    if mode.contains("pca") {
        cfg.attn.mode = AttnMode::Pca;
        cfg.attn.iters = 3;
    }
    let mut model = VmModel::new(&cfg, seed)?;
    let mut tc = VisionTrainConfig {
        steps,
        batch_size,
        ..Default::default()
    };
    if let Some(lr) = args.get(5).and_then(|s| s.parse().ok()) {
        tc.lr = lr;
    }
    let t0 = Instant::now();
    let losses = train_vision(&mut model, &train, &tc, &seeds)?;
    let tail = losses.iter().rev().take(20).sum::<f64>() / losses.len().clamp(1, 20) as f64;
    println!(
        "{mode} seed {seed}: {} params, {steps} steps in {:.0}s, loss {tail:.3}",
        model.store.scalar_count(),
        t0.elapsed().as_secs_f64()
    );
    for (name, noise) in [("clean", NoiseParams::clean()), ("noisy", NoiseParams::moderate())] {
        let imgs = render_set(&test, 48, &noise, &SeedTree::new(7))?;
        let rounds: Vec<String> = evaluate_vision(&model, &imgs)?
            .iter()
            .map(|s| format!("char {:.3} word {:.3}", s.char_accuracy, s.word_accuracy))
            .collect();
        println!("  {name}: {}", rounds.join(" | "));
    }
    if let Some(text) = test.first() {
        let img = render_set(std::slice::from_ref(text), 48, &NoiseParams::clean(), &SeedTree::new(7))?;
        let read = model.predict(&img)?;
        println!("  {text}\n  {}", read[0].decode(model.vm.charset()));
    }
    Ok(())
}
