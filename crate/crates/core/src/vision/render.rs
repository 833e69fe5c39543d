use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::rng_from_seed;
use crate::vision::font::{glyph, GLYPH_H, GLYPH_W};

pub const CELL_W: usize = 8;
pub const CELL_H: usize = 16;
pub const MAX_JITTER: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    /// Standard deviation of additive Gaussian pixel noise.
    pub sigma: f64,
    /// Fraction of pixels forced to black or white.
    pub salt_pepper: f64,
    /// Probability of drawing one grey vertical bar across the text.
    pub occlusion: f64,
    /// Maximum horizontal shift of each glyph, in pixels (at most 2).
    pub jitter: usize,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self::clean()
    }
}

impl NoiseParams {
    pub fn clean() -> Self {
        Self {
            sigma: 0.0,
            salt_pepper: 0.0,
            occlusion: 0.0,
            jitter: 0,
        }
    }

    pub fn moderate() -> Self {
        Self {
            sigma: 0.25,
            salt_pepper: 0.03,
            occlusion: 0.3,
            jitter: 1,
        }
    }

    pub fn heavy() -> Self {
        Self {
            sigma: 0.45,
            salt_pepper: 0.08,
            occlusion: 0.6,
            jitter: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if self.sigma < 0.0 || !unit.contains(&self.salt_pepper) || !unit.contains(&self.occlusion) {
            return Err(Error::Config(format!("invalid noise parameters {self:?}")));
        }
        if self.jitter > MAX_JITTER {
            return Err(Error::Config(format!("jitter {} exceeds {MAX_JITTER}", self.jitter)));
        }
        Ok(())
    }
}

/// Grey-scale raster in `[0, 1]`, white text on black.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphImage {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
    pub text: String,
    pub noise: NoiseParams,
}

impl GlyphImage {
    pub fn pixel(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.w + x]
    }

    /// `[1, h, w, 1]` network input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.h, self.w, 1], self.pixels.clone()).expect("pixel count matches")
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm(path, self.w, self.h, &self.pixels)
    }
}

/// Stacks images of one canvas size into a `[B, h, w, 1]` batch.
pub fn image_batch(images: &[GlyphImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Config("empty image batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.pixels.len());
    for img in images {
        if (img.h, img.w) != (first.h, first.w) {
            return Err(Error::shape("image batch", &[first.h, first.w], &[img.h, img.w]));
        }
        data.extend_from_slice(&img.pixels);
    }
    Tensor::new(vec![images.len(), first.h, first.w, 1], data)
}

/// Renders `text` left-aligned onto a `16 x (8 * t_max)` canvas. Output is a
/// pure function of `(text, noise, seed)`.
pub fn render_text(text: &str, t_max: usize, noise: &NoiseParams, seed: u64) -> Result<GlyphImage> {
    noise.validate()?;
    let chars: Vec<char> = text.chars().collect();
    if chars.len() > t_max {
        return Err(Error::InvalidText {
            text: text.into(),
            reason: format!("longer than {t_max} symbols"),
        });
    }
    let glyphs = chars
        .iter()
        .map(|&c| glyph(c).ok_or(Error::UnsupportedGlyph(c)))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (CELL_H, CELL_W * t_max);
    let mut px = vec![0.0; h * w];
    let mut rng = rng_from_seed(seed);
    for (i, g) in glyphs.iter().enumerate() {
        let shift = if noise.jitter > 0 {
            rng.random_range(-(noise.jitter as i64)..=noise.jitter as i64)
        } else {
            0
        };
        let x0 = (i * CELL_W + 1) as i64 + shift;
        for (r, row) in g.iter().enumerate() {
            for (c, &on) in row.iter().enumerate() {
                let x = x0 + c as i64;
                if !on || x < 0 || x >= w as i64 {
                    continue;
                }
                for dy in 0..2 {
                    px[(1 + 2 * r + dy) * w + x as usize] = 1.0;
                }
            }
        }
    }
    debug_assert!(GLYPH_W < CELL_W && 2 * GLYPH_H < CELL_H);
    if noise.occlusion > 0.0 && rng.random_bool(noise.occlusion) {
        let span = (chars.len() * CELL_W).max(2);
        let x = rng.random_range(0..span.min(w - 1));
        let shade = rng.random_range(0.3..0.7);
        for y in 0..h {
            for xx in x..(x + 2).min(w) {
                px[y * w + xx] = shade;
            }
        }
    }
    if noise.sigma > 0.0 {
        let normal = Normal::new(0.0, noise.sigma).map_err(|e| Error::Config(e.to_string()))?;
        px.iter_mut().for_each(|p| *p += normal.sample(&mut rng));
    }
    if noise.salt_pepper > 0.0 {
        for p in px.iter_mut() {
            if rng.random_bool(noise.salt_pepper) {
                *p = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            }
        }
    }
    px.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    Ok(GlyphImage {
        h,
        w,
        pixels: px,
        text: text.into(),
        noise: *noise,
    })
}

/// Writes a binary grey-scale PGM, mapping `[0, 1]` to `0..=255`.
pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[f64]) -> Result<()> {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Nearest-neighbour enlargement of an `h x w` raster, rescaled to `[0, 1]`.
pub fn heat_raster(values: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            out[y * out_w + x] = values[(y * h / out_h) * w + x * w / out_w] / max;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_render_is_binary_and_deterministic() {
        let a = render_text("ab12", 8, &NoiseParams::clean(), 3).unwrap();
        let b = render_text("ab12", 8, &NoiseParams::clean(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.h, a.w), (16, 64));
        assert!(a.pixels.iter().all(|&p| p == 0.0 || p == 1.0));
    }

    #[test]
    fn different_letters_differ() {
        let a = render_text("a", 4, &NoiseParams::clean(), 0).unwrap();
        let b = render_text("b", 4, &NoiseParams::clean(), 0).unwrap();
        let diff = a.pixels.iter().zip(&b.pixels).filter(|(x, y)| x != y).count();
        assert!(diff > 5, "{diff}");
    }

    #[test]
    fn noisy_render_stays_in_range_and_depends_on_seed() {
        let n = NoiseParams::heavy();
        let a = render_text("hello", 8, &n, 1).unwrap();
        let b = render_text("hello", 8, &n, 2).unwrap();
        assert!(a.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_ne!(a.pixels, b.pixels);
        assert_eq!(a, render_text("hello", 8, &n, 1).unwrap());
    }

    #[test]
    fn unsupported_glyph_is_named() {
        let err = render_text("a#", 4, &NoiseParams::clean(), 0).unwrap_err();
        assert!(err.to_string().contains('#'));
    }

    #[test]
    fn pgm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = render_text("ok", 3, &NoiseParams::clean(), 0).unwrap();
        img.write_pgm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n24 16\n255\n"));
        assert_eq!(bytes.len(), b"P5\n24 16\n255\n".len() + 16 * 24);
    }
}
