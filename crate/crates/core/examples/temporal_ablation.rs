//! Walkers that share one body and differ only in how they move. Ordered
//! clips identify them; shuffling the frames removes most of the signal.
//!
//! cargo run --release --example temporal_ablation

use gaitgraph::config::RunConfig;
use gaitgraph::experiment::run_experiment;
use gaitgraph::synthetic::{generate_corpus, SyntheticConfig};

fn main() -> gaitgraph::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = RunConfig::desk_scale();
    let corpus = generate_corpus(&SyntheticConfig { temporal_only: true, ..Default::default() });
    let outcome = run_experiment(&config, &corpus)?;
    println!("condition  sort  shuffle  drop");
    for (condition, sorted) in &outcome.sort.tables {
        let sort = sorted.mean.unwrap_or(f64::NAN);
        let shuffle = outcome.shuffle.tables[condition].mean.unwrap_or(f64::NAN);
        println!("{:<9} {sort:5.1} {shuffle:8.1} {:5.1}", condition.label(), sort - shuffle);
    }
    Ok(())
}
