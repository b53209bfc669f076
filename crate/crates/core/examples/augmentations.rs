//! Applies each augmentation to one generated walk and reports what changed.
//!
//! cargo run --example augmentations

use gaitgraph::augment::{eval_view, mirror_pose, normalize_coords, reverse_time, shuffle_frames, train_view, AugmentConfig};
use gaitgraph::dataset::{Condition, PoseSequence, SequenceKey};
use gaitgraph::skeleton::SkeletonTopology;
use gaitgraph::synthetic::{generate_sequence, SyntheticConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn extent(seq: &PoseSequence) -> (f64, f64, f64, f64) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for j in seq.data().chunks(3) {
        x0 = x0.min(j[0]);
        x1 = x1.max(j[0]);
        y0 = y0.min(j[1]);
        y1 = y1.max(j[1]);
    }
    (x0, x1, y0, y1)
}

fn describe(name: &str, seq: &PoseSequence) {
    let (x0, x1, y0, y1) = extent(seq);
    let nose = seq.frame(0);
    println!(
        "{name:<12} {:>3} frames  x [{x0:8.3}, {x1:8.3}]  y [{y0:8.3}, {y1:8.3}]  nose@0 ({:.3}, {:.3})",
        seq.num_frames(),
        nose[0],
        nose[1]
    );
}

fn main() -> gaitgraph::Result<()> {
    let topology = SkeletonTopology::coco17();
    let key = SequenceKey { subject: 1, condition: Condition::Nm, seq: 1, view: 90 };
    let seq = generate_sequence(&SyntheticConfig::default(), key);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let config = AugmentConfig::default();

    describe("raw", &seq);
    let norm = normalize_coords(&seq)?;
    describe("normalized", &norm);
    describe("reversed", &reverse_time(&norm));
    describe("mirrored", &mirror_pose(&norm, &topology));
    describe("shuffled", &shuffle_frames(&norm, &mut rng));
    describe("eval view", &eval_view(&seq, config.window)?);
    for i in 0..3 {
        describe(&format!("train #{i}"), &train_view(&seq, &config, &topology, &mut rng)?);
    }
    assert_eq!(reverse_time(&reverse_time(&norm)), norm);
    let twice = mirror_pose(&mirror_pose(&norm, &topology), &topology);
    let gap = twice.data().iter().zip(norm.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("reverse twice: exact, mirror twice: max gap {gap:.1e}");
    Ok(())
}
