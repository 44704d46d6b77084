//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use openmixer::data::{generate_synthetic, SynthConfig, SyntheticDataset};
use openmixer::eval::{Detection, EvalClass, GtTube};
use openmixer::Rect;

pub fn cost_matrix(seed: u64, queries: usize, targets: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..targets)
        .map(|_| (0..queries).map(|_| rng.random_range(0.0..10.0)).collect())
        .collect()
}

/// One jittered detection per frame around each ground-truth tube, plus
/// scattered false positives.
pub fn eval_instance(seed: u64, videos: usize, frames: usize) -> (Vec<Detection>, Vec<GtTube>, Vec<EvalClass>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = vec![
        EvalClass { name: "a".into(), novel: false },
        EvalClass { name: "b".into(), novel: true },
    ];
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for v in 0..videos {
        let video_id = format!("v{v:03}");
        let class = v % 2;
        let (x, y) = (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0));
        let mut boxes = Vec::new();
        for f in 0..frames {
            let r = Rect::new(x + f as f64, y, x + f as f64 + 40.0, y + 60.0);
            boxes.push((f, r));
            let j = rng.random_range(-4.0..4.0);
            for c in 0..2 {
                dets.push(Detection {
                    video_id: video_id.clone(),
                    frame: f,
                    class: c,
                    score: if c == class { rng.random_range(0.5..1.0) } else { rng.random_range(0.0..0.5) },
                    rect: Rect::new(r.x1 + j, r.y1 + j, r.x2 + j, r.y2 + j),
                });
            }
            if rng.random_bool(0.2) {
                let (fx, fy) = (rng.random_range(0.0..250.0), rng.random_range(0.0..250.0));
                dets.push(Detection {
                    video_id: video_id.clone(),
                    frame: f,
                    class,
                    score: rng.random_range(0.0..1.0),
                    rect: Rect::new(fx, fy, fx + 30.0, fy + 30.0),
                });
            }
        }
        gts.push(GtTube { video_id, class, boxes });
    }
    (dets, gts, classes)
}

pub fn small_dataset() -> SyntheticDataset {
    let synth = SynthConfig {
        train_videos_per_base_class: 1,
        test_videos_per_base_class: 1,
        videos_per_novel_class: 1,
        ..SynthConfig::default()
    };
    generate_synthetic(&synth, 0).expect("synthetic dataset")
}
