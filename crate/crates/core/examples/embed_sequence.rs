//! Embeds one pose CSV with a saved weight file, or with a freshly
//! initialized reduced network when no weights are given.
//!
//! cargo run --release --example embed_sequence -- <sequence.csv> [weights.ggw]

use std::path::PathBuf;

use gaitgraph::dataset::{read_sequence, Condition, SequenceKey};
use gaitgraph::eval::embed_sequence;
use gaitgraph::model::{GaitModel, ModelSpec};
use gaitgraph::skeleton::SkeletonTopology;
use gaitgraph::weights::load_weights_file;

fn main() -> gaitgraph::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(args.next().expect("usage: embed_sequence <sequence.csv> [weights.ggw]"));
    let topology = SkeletonTopology::coco17();
    let model = match args.next() {
        Some(weights) => load_weights_file(weights.as_ref(), &topology)?,
        None => GaitModel::<f32>::new(&ModelSpec::resgcn_n39_r8().scaled(4), &topology, 0)?,
    };
    let key = SequenceKey::from_path(&path).unwrap_or(SequenceKey {
        subject: 0,
        condition: Condition::Nm,
        seq: 1,
        view: 0,
    });
    let seq = read_sequence(&path, key)?;
    let embedding = embed_sequence(&model, &seq, 60)?;
    let norm = embedding.iter().map(|v| v * v).sum::<f32>().sqrt();
    println!("{} frames -> {} dims, norm {norm:.6}", seq.num_frames(), embedding.len());
    println!("{:?}", &embedding[..8]);
    Ok(())
}
