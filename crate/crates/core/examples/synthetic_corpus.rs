//! Writes a generated corpus in the on-disk layout, indexes it back and
//! prints the subject partition.
//!
//! cargo run --example synthetic_corpus -- <dir> [subjects]

use gaitgraph::dataset::{gallery_probe_split, index_corpus, lt_partition};
use gaitgraph::synthetic::{write_corpus, SyntheticConfig};

fn main() -> gaitgraph::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = std::path::PathBuf::from(args.next().unwrap_or_else(|| "synthetic-corpus".into()));
    let subjects = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let config = SyntheticConfig { subjects, ..Default::default() };
    let written = write_corpus(&config, &dir)?;
    println!("wrote {} sequences to {}", written.len(), dir.display());

    let index = index_corpus(&dir)?;
    assert_eq!(index.len(), written.len());
    let (train, test) = lt_partition(&index);
    println!("train subjects {:?}", train.subjects());
    println!("test subjects  {:?}", test.subjects());
    let split = gallery_probe_split(&test);
    println!("gallery {} sequences", split.gallery.len());
    for (condition, probes) in &split.probes {
        println!("probe {} {} sequences", condition.label(), probes.len());
    }
    Ok(())
}
