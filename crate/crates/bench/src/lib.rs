//! Deterministic inputs shared by the benches.

use visknow_core::benchmarks::kgc::{QueryMode, RankQuery};
use visknow_core::benchmarks::segmentation::Instance;
use visknow_core::graph::ImageId;
use visknow_core::{BBox, BinaryMask};

/// Tiny xorshift generator; inputs are identical across runs.
pub struct XorShift(u64);

impl XorShift {
    pub fn new(seed: u64) -> Self {
        Self(seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407) | 1)
    }

    pub fn next_f64(&mut self) -> f64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize % n.max(1)
    }
}

pub fn rank_queries(n_queries: usize, n_entities: usize, seed: u64) -> Vec<RankQuery> {
    let mut rng = XorShift::new(seed);
    (0..n_queries)
        .map(|i| RankQuery {
            mode: if i % 2 == 0 { QueryMode::TailPrediction } else { QueryMode::HeadPrediction },
            relation: i % 7,
            anchor: rng.below(n_entities),
            gold: rng.below(n_entities),
            scores: (0..n_entities).map(|_| rng.next_f64()).collect(),
        })
        .collect()
}

/// Gold boxes and jittered, scored predictions over `images` 64x64 images.
pub fn instances(images: usize, per_image: usize, with_masks: bool, seed: u64) -> (Vec<Instance>, Vec<Instance>) {
    let mut rng = XorShift::new(seed);
    let parts = ["head", "leg", "tail", "wing"];
    let (mut gold, mut pred) = (Vec::new(), Vec::new());
    for img in 0..images {
        for k in 0..per_image {
            let bbox = BBox::new(rng.next_f64() * 32.0, rng.next_f64() * 32.0, 8.0 + rng.next_f64() * 24.0, 8.0 + rng.next_f64() * 24.0);
            let jitter = BBox::new(bbox.x + rng.next_f64() * 4.0 - 2.0, bbox.y + rng.next_f64() * 4.0 - 2.0, bbox.w, bbox.h);
            let make = |b: BBox, score: f64| Instance {
                image: ImageId::new(format!("img{img}")),
                label: parts[k % parts.len()].to_string(),
                bbox: b,
                mask: with_masks.then(|| BinaryMask::from_box(64, 64, &b)),
                score,
            };
            gold.push(make(bbox, 1.0));
            pred.push(make(jitter, rng.next_f64()));
        }
    }
    (gold, pred)
}
