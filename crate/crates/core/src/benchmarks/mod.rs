//! Benchmark export and scoring: TextBench (link prediction), PartBench
//! (part segmentation) and the retrieval-augmented VQA protocol.

pub mod kgc;
pub mod partbench;
pub mod segmentation;
pub mod textbench;
pub mod vqa;

pub use kgc::{rank_metrics, QueryMode, RankMetrics, RankQuery};
pub use partbench::{export_partbench, PartBenchSplit};
pub use segmentation::{instance_ap, merge_instances, semantic_seg_metrics, ApMetrics, SegMetrics};
pub use textbench::{export_textbench, TextBenchSplit, TextTriple};
pub use vqa::{build_vqa_benchmark, score_vqa_run, VqaItem, VqaScores};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// RNG for one named stream under a global seed, so adding or removing one
/// stream does not shift the draws of another.
pub(crate) fn stream_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(format!("{seed}:{stream}").as_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
