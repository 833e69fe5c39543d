//! Public-domain style 5x7 bitmap glyphs. Letters use capital forms.

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

const GLYPHS: [(char, [&str; GLYPH_H]); 36] = [
    ('0', ["01110", "10001", "10011", "10101", "11001", "10001", "01110"]),
    ('1', ["00100", "01100", "00100", "00100", "00100", "00100", "01110"]),
    ('2', ["01110", "10001", "00001", "00010", "00100", "01000", "11111"]),
    ('3', ["11111", "00010", "00100", "00010", "00001", "10001", "01110"]),
    ('4', ["00010", "00110", "01010", "10010", "11111", "00010", "00010"]),
    ('5', ["11111", "10000", "11110", "00001", "00001", "10001", "01110"]),
    ('6', ["00110", "01000", "10000", "11110", "10001", "10001", "01110"]),
    ('7', ["11111", "00001", "00010", "00100", "01000", "01000", "01000"]),
    ('8', ["01110", "10001", "10001", "01110", "10001", "10001", "01110"]),
    ('9', ["01110", "10001", "10001", "01111", "00001", "00010", "01100"]),
    ('a', ["01110", "10001", "10001", "11111", "10001", "10001", "10001"]),
    ('b', ["11110", "10001", "10001", "11110", "10001", "10001", "11110"]),
    ('c', ["01110", "10001", "10000", "10000", "10000", "10001", "01110"]),
    ('d', ["11100", "10010", "10001", "10001", "10001", "10010", "11100"]),
    ('e', ["11111", "10000", "10000", "11110", "10000", "10000", "11111"]),
    ('f', ["11111", "10000", "10000", "11110", "10000", "10000", "10000"]),
    ('g', ["01110", "10001", "10000", "10111", "10001", "10001", "01111"]),
    ('h', ["10001", "10001", "10001", "11111", "10001", "10001", "10001"]),
    ('i', ["01110", "00100", "00100", "00100", "00100", "00100", "01110"]),
    ('j', ["00111", "00010", "00010", "00010", "00010", "10010", "01100"]),
    ('k', ["10001", "10010", "10100", "11000", "10100", "10010", "10001"]),
    ('l', ["10000", "10000", "10000", "10000", "10000", "10000", "11111"]),
    ('m', ["10001", "11011", "10101", "10101", "10001", "10001", "10001"]),
    ('n', ["10001", "10001", "11001", "10101", "10011", "10001", "10001"]),
    ('o', ["01110", "10001", "10001", "10001", "10001", "10001", "01110"]),
    ('p', ["11110", "10001", "10001", "11110", "10000", "10000", "10000"]),
    ('q', ["01110", "10001", "10001", "10001", "10101", "10010", "01101"]),
    ('r', ["11110", "10001", "10001", "11110", "10100", "10010", "10001"]),
    ('s', ["01111", "10000", "10000", "01110", "00001", "00001", "11110"]),
    ('t', ["11111", "00100", "00100", "00100", "00100", "00100", "00100"]),
    ('u', ["10001", "10001", "10001", "10001", "10001", "10001", "01110"]),
    ('v', ["10001", "10001", "10001", "10001", "10001", "01010", "00100"]),
    ('w', ["10001", "10001", "10001", "10101", "10101", "10101", "01010"]),
    ('x', ["10001", "10001", "01010", "00100", "01010", "10001", "10001"]),
    ('y', ["10001", "10001", "10001", "01010", "00100", "00100", "00100"]),
    ('z', ["11111", "00001", "00010", "00100", "01000", "10000", "11111"]),
];

/// Row-major on/off pixels of `ch` (case-folded), if the font has it.
pub fn glyph(ch: char) -> Option<[[bool; GLYPH_W]; GLYPH_H]> {
    let ch = ch.to_ascii_lowercase();
    let (_, rows) = GLYPHS.iter().find(|(c, _)| *c == ch)?;
    let mut out = [[false; GLYPH_W]; GLYPH_H];
    for (r, row) in rows.iter().enumerate() {
        for (c, bit) in row.bytes().enumerate() {
            out[r][c] = bit == b'1';
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_glyph_is_distinct() {
        let all: Vec<_> = GLYPHS.iter().map(|(c, _)| glyph(*c).unwrap()).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j], "{} vs {}", GLYPHS[i].0, GLYPHS[j].0);
            }
        }
    }

    #[test]
    fn covers_default_charset() {
        assert!(crate::lm::DEFAULT_SYMBOLS.chars().all(|c| glyph(c).is_some()));
        assert!(glyph('#').is_none());
    }
}
