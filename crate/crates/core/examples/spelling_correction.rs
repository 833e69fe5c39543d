//! Pretrains a bidirectional cloze model and a causal baseline under one step
//! budget, then scores both on a seed-fixed spelling benchmark.
//!
//! ```text
//! cargo run --release --example spelling_correction -- [steps] [seed] [items]
//! ```

use std::time::Instant;

use clozeread::lm::{evaluate_spelling, pretrain_lm, LmConfig, LmModel, LmVariant, PretrainConfig};
use clozeread::nn::BlockConfig;
use clozeread::rng::SeedTree;
use clozeread::textdata::{embedded_words, make_spelling_benchmark, BenchRatios, CHAR_ACCURACY_DEFINITION};

const T_MAX: usize = 12;

fn main() -> clozeread::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (steps, seed, items) = (arg(1, 600), arg(2, 1) as u64, arg(3, 2000));
    let corpus = embedded_words(3, T_MAX);
    let bench = make_spelling_benchmark(&corpus, items, BenchRatios::default(), seed, &Default::default(), T_MAX, false)?;
    println!("corpus {} words, benchmark {} items, {steps} steps, seed {seed}", corpus.len(), bench.items.len());
    println!("{CHAR_ACCURACY_DEFINITION}");
    for variant in [LmVariant::Bcn, LmVariant::Causal] {
        let cfg = LmConfig {
            layers: 2,
            block: BlockConfig::new(64, 4).without_dropout(),
            t_max: T_MAX,
            variant,
            ..LmConfig::default()
        };
        let mut model = LmModel::new(&cfg, seed)?;
        let pc = PretrainConfig {
            steps,
            lr: 3e-3,
            ..PretrainConfig::default()
        };
        let t0 = Instant::now();
        let report = pretrain_lm(&mut model, &corpus, &pc, &SeedTree::new(seed))?;
        let m = evaluate_spelling(&model, &bench.items, 5)?;
        println!(
            "{variant:?}: {} params, {:.0}s, loss {:.3}, char {:.3}, top-1 {:.3}, top-5 {:.3}",
            model.store.scalar_count(),
            t0.elapsed().as_secs_f64(),
            report.losses.last().copied().unwrap_or(f64::NAN),
            m.char_accuracy,
            m.top1(),
            m.word_accuracy()
        );
    }
    Ok(())
}
