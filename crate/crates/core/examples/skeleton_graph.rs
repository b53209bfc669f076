//! COCO skeleton, its normalized adjacency and the three spatial partitions.
//!
//! cargo run --example skeleton_graph

use gaitgraph::skeleton::{spatial_partition, SkeletonTopology, SquareMatrix};

fn print_matrix(name: &str, m: &SquareMatrix) {
    println!("{name}");
    for i in 0..m.size() {
        let row: Vec<String> = (0..m.size())
            .map(|j| if m[(i, j)] == 0.0 { "  .  ".into() } else { format!("{:.2} ", m[(i, j)]) })
            .collect();
        println!("  {:>2} {}", i, row.join(""));
    }
}

fn main() -> gaitgraph::Result<()> {
    let topology = SkeletonTopology::coco17();
    let hops = topology.hop_distances();
    let mirror = topology.mirror_map();
    println!("joint              hops  mirror");
    for (i, name) in topology.joint_names.iter().enumerate() {
        println!("{:>2} {:<15} {:>4}  {}", i, name, hops[i].unwrap(), topology.joint_names[mirror[i]]);
    }

    let set = spatial_partition(&topology)?;
    print_matrix("normalized A + I", &set.full);
    for (name, m) in ["root", "centripetal", "centrifugal"].iter().zip(&set.masks) {
        let count = m.data().iter().filter(|&&v| v > 0.0).count();
        println!("{name}: {count} entries");
    }
    Ok(())
}
