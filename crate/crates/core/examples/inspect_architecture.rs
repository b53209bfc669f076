//! Layer table and parameter counts of the full and reduced networks, with
//! the static trace checked against a real forward pass.
//!
//! cargo run --example inspect_architecture -- [frames]

use gaitgraph::model::{shape_trace, GaitModel, ModelSpec};
use gaitgraph::skeleton::SkeletonTopology;
use gaitgraph::tensor::Tensor;

fn main() -> gaitgraph::Result<()> {
    let frames: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let spec = ModelSpec::resgcn_n39_r8();
    println!("Block    Module      Output dimension");
    for row in shape_trace(&spec, [frames, 17, 3])? {
        println!("{row}");
    }

    let topology = SkeletonTopology::coco17();
    for divisor in [1, 2, 4, 8] {
        let spec = spec.scaled(divisor);
        let model = GaitModel::<f32>::new(&spec, &topology, 0)?;
        let x = Tensor::<f32>::zeros(&[1, frames, 17, 3]);
        let traced = model.infer_trace(&x)?;
        let last = traced.last().map(|s| format!("{s:?}")).unwrap_or_default();
        println!("width 1/{divisor}: {:>7} parameters, spec {}, embedding {last}", model.num_parameters(), &spec.hash()[..12]);
    }
    Ok(())
}
