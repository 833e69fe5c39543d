//! Draws spelling perturbations and online batch fills, printing a few
//! samples and the empirical operation frequencies.
//!
//! ```text
//! cargo run --release --example augmentation -- [draws]
//! ```

use std::collections::HashMap;

use clozeread::lm::Charset;
use clozeread::rng::rng_from_seed;
use clozeread::textdata::{embedded_words, osa_fill, saa_perturb, AugConfig, AugOp};

fn main() -> clozeread::Result<()> {
    let draws: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100_000);
    let cfg = AugConfig::default();
    let charset = Charset::default();
    let corpus = embedded_words(4, 10);
    let mut rng = rng_from_seed(3);

    for word in corpus.iter().step_by(997).take(8) {
        let (noisy, op) = saa_perturb(word, &cfg, &charset, 12, &mut rng);
        println!("{word:>12} -> {noisy:<12} {op:?}");
    }

    let mut counts: HashMap<AugOp, usize> = HashMap::new();
    for i in 0..draws {
        let (_, op) = saa_perturb(&corpus[i % corpus.len()], &cfg, &charset, 25, &mut rng);
        *counts.entry(op).or_default() += 1;
    }
    println!("\n{draws} draws");
    for (op, p) in [
        (AugOp::Replace, cfg.p_replace),
        (AugOp::Insert, cfg.p_insert),
        (AugOp::Delete, cfg.p_delete),
        (AugOp::Unchanged, cfg.p_unchanged),
    ] {
        let f = counts.get(&op).copied().unwrap_or(0) as f64 / draws as f64;
        println!("{:<10} expected {p:.3} observed {f:.4}", format!("{op:?}"));
    }

    println!("\nonline sampling to a batch of {}", cfg.lm_batch);
    for b_o in [0, 1, cfg.lm_batch - 1, cfg.lm_batch, cfg.lm_batch + 50] {
        let batch = corpus[..b_o].to_vec();
        let filled = osa_fill(&batch, &corpus, cfg.lm_batch, &mut rng)?;
        println!("{b_o:>4} batch texts -> {} language-model texts", filled.len());
    }
    Ok(())
}
