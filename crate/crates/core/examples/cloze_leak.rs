//! Perturbs one input position at a time and reports how far each output
//! position moves. The cloze model's output at position i never sees input
//! i; the causal baseline's output at i never sees anything to its right.
//!
//! ```text
//! cargo run --release --example cloze_leak -- [layers] [t]
//! ```

use clozeread::lm::{LmConfig, LmModel, LmVariant};
use clozeread::nn::BlockConfig;
use clozeread::numerics::{Tape, Tensor};
use clozeread::rng::SeedTree;
use rand::Rng;

fn random_rows(t: usize, c: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut x: Vec<f64> = (0..t * c).map(|_| rng.random_range(-3.0..3.0_f64).exp()).collect();
    for row in x.chunks_mut(c) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    x
}

fn logits(model: &LmModel, x: &[f64], t: usize, c: usize) -> clozeread::Result<Tensor> {
    let mut tape = Tape::with_params(&model.store);
    let input = tape.constant(Tensor::new(vec![1, t, c], x.to_vec())?);
    let out = model.lm.forward(&mut tape, input, &[t])?;
    Ok(tape.value(out.logits).clone())
}

fn main() -> clozeread::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (layers, t) = (arg(1, 2), arg(2, 5));
    let mut rng = SeedTree::new(7).rng("inputs");
    for variant in [LmVariant::Bcn, LmVariant::Causal] {
        let cfg = LmConfig {
            layers,
            block: BlockConfig::new(32, 4).without_dropout(),
            t_max: t - 1,
            variant,
            ..LmConfig::default()
        };
        let model = LmModel::new(&cfg, 1)?;
        let c = model.lm.charset().num_classes();
        let base = random_rows(t, c, &mut rng);
        let before = logits(&model, &base, t, c)?;
        println!("{variant:?}: max |change| of output row (columns) after perturbing input row (rows)");
        for i in 0..t {
            let mut x = base.clone();
            x[i * c..(i + 1) * c].copy_from_slice(&random_rows(1, c, &mut rng));
            let after = logits(&model, &x, t, c)?;
            let cells: Vec<String> = (0..t)
                .map(|p| {
                    let d = (0..c).map(|k| (after.row(p)[k] - before.row(p)[k]).abs()).fold(0.0, f64::max);
                    if d == 0.0 { "       0".into() } else { format!("{d:8.1e}") }
                })
                .collect();
            println!("  in {i:>2}: {}", cells.join(" "));
        }
    }
    Ok(())
}
