//! Renders a string at the three noise presets as binary PGM files.
//!
//! ```text
//! cargo run --release --example render_glyphs -- [text] [out_dir]
//! ```

use std::path::PathBuf;

use clozeread::vision::{render_text, NoiseParams};

fn main() -> clozeread::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let text = args.get(1).cloned().unwrap_or_else(|| "glyphs".into());
    let dir = PathBuf::from(args.get(2).cloned().unwrap_or_else(|| "renders".into()));
    std::fs::create_dir_all(&dir).map_err(|e| clozeread::Error::io(&dir, e))?;
    let t_max = text.chars().count().max(1);
    for (name, noise) in [("clean", NoiseParams::clean()), ("moderate", NoiseParams::moderate()), ("heavy", NoiseParams::heavy())] {
        let img = render_text(&text, t_max, &noise, 1)?;
        let path = dir.join(format!("{name}.pgm"));
        img.write_pgm(&path)?;
        let mean = img.pixels.iter().sum::<f64>() / img.pixels.len() as f64;
        println!("{} ({}x{}, mean intensity {mean:.3})", path.display(), img.w, img.h);
    }
    let img = render_text(&text, t_max, &NoiseParams::clean(), 1)?;
    for y in 0..img.h {
        let line: String = (0..img.w).map(|x| if img.pixel(y, x) > 0.5 { '#' } else { '.' }).collect();
        println!("{line}");
    }
    Ok(())
}
