use clozeread::rng::SeedTree;
use clozeread::vision::data::render_set;
use clozeread::vision::{AttnMode, NoiseParams, VisionConfig, VmModel};

fn small(mode: AttnMode) -> VisionConfig {
    let mut cfg = VisionConfig {
        t_max: 8,
        ..VisionConfig::default()
    };
    cfg.attn.mode = mode;
    cfg.attn.iters = 3;
    cfg
}

#[test]
fn untrained_content_attention_matches_position_attention() {
    let words: Vec<String> = ["cloze", "reading", "gate"].iter().map(|s| s.to_string()).collect();
    let imgs = render_set(&words, 8, &NoiseParams::clean(), &SeedTree::new(3)).unwrap();
    let pa = VmModel::new(&small(AttnMode::Pa), 5).unwrap().predict(&imgs).unwrap();
    let pca = VmModel::new(&small(AttnMode::Pca), 5).unwrap().predict_iters(&imgs).unwrap();
    assert_eq!(pca.len(), 3);
    for round in &pca {
        for (a, b) in round.iter().zip(&pa) {
            let gap = a.probs.data().iter().zip(b.probs.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(gap < 1e-12, "round differs from plain attention by {gap}");
        }
    }
}

#[test]
fn untrained_attention_rows_are_nearly_uniform_over_classes() {
    let words = vec!["abcdefg".to_string()];
    let imgs = render_set(&words, 8, &NoiseParams::clean(), &SeedTree::new(4)).unwrap();
    let out = VmModel::new(&small(AttnMode::Pa), 9).unwrap().predict(&imgs).unwrap();
    let p = &out[0].probs;
    for r in 0..p.rows() {
        let row = p.row(r);
        let hi = row.iter().cloned().fold(f64::MIN, f64::max);
        let lo = row.iter().cloned().fold(f64::MAX, f64::min);
        assert!(hi - lo < 0.2, "row {r} spread {}", hi - lo);
    }
}
