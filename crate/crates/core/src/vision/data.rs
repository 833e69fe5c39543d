use rand::Rng as _;

use crate::error::Result;
use crate::rng::{Rng, SeedTree};
use crate::vision::render::{render_text, GlyphImage, NoiseParams};

/// Renders each word once with its own seed derived from `seeds`.
pub fn render_set(words: &[String], t_max: usize, noise: &NoiseParams, seeds: &SeedTree) -> Result<Vec<GlyphImage>> {
    words
        .iter()
        .enumerate()
        .map(|(i, w)| render_text(w, t_max, noise, seeds.child(&i.to_string()).seed()))
        .collect()
}

/// Draws `batch` words uniformly and renders them with fresh noise.
pub fn sample_batch(words: &[String], batch: usize, t_max: usize, noise: &NoiseParams, rng: &mut Rng) -> Result<Vec<GlyphImage>> {
    (0..batch)
        .map(|_| {
            let w = &words[rng.random_range(0..words.len())];
            render_text(w, t_max, noise, rng.random())
        })
        .collect()
}

/// Random strings over `symbols` with lengths in `lengths`.
pub fn random_strings(n: usize, lengths: std::ops::RangeInclusive<usize>, symbols: &str, rng: &mut Rng) -> Vec<String> {
    let sym: Vec<char> = symbols.chars().collect();
    (0..n)
        .map(|_| {
            let len = rng.random_range(lengths.clone());
            (0..len).map(|_| sym[rng.random_range(0..sym.len())]).collect()
        })
        .collect()
}

/// Concatenates random corpus words until the length falls in `lengths`.
pub fn word_chains(n: usize, lengths: std::ops::RangeInclusive<usize>, corpus: &[String], rng: &mut Rng) -> Vec<String> {
    let (lo, hi) = (*lengths.start(), *lengths.end());
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let target = rng.random_range(lo..=hi);
        let mut s = String::new();
        while s.len() < target {
            s.push_str(&corpus[rng.random_range(0..corpus.len())]);
        }
        s.truncate(target);
        out.push(s);
    }
    out
}
