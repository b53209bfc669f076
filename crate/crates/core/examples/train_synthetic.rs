//! Trains the reduced network on a generated corpus and scores the held-out
//! subjects with ordered and shuffled clips. Optional `key=value` arguments
//! override the run configuration, e.g. `train.epochs_scale=0.05`.
//!
//! cargo run --release --example train_synthetic -- [key=value ...] [--save weights.ggw]

use gaitgraph::config::RunConfig;
use gaitgraph::experiment::run_experiment;
use gaitgraph::synthetic::{generate_corpus, SyntheticConfig};
use gaitgraph::weights::save_weights_file;

fn main() -> gaitgraph::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let save = args.iter().position(|a| a == "--save").map(|i| {
        let path = args.get(i + 1).cloned().unwrap_or_else(|| "weights.ggw".into());
        args.drain(i..(i + 2).min(args.len()));
        path
    });
    let config = RunConfig::desk_scale().with_assignments(&args)?;
    let corpus = generate_corpus(&SyntheticConfig::default());
    println!("{} sequences, {} epochs", corpus.len(), config.train.total_epochs());

    let outcome = run_experiment(&config, &corpus)?;
    println!("trained in {:.1}s, {} steps", outcome.train_time.as_secs_f64(), outcome.trainer.step);
    print!("{}", outcome.sort.to_text());
    print!("{}", outcome.shuffle.to_text());
    if let Some(path) = save {
        save_weights_file(&outcome.trainer.model, path.as_ref())?;
        println!("weights written to {path}");
    }
    Ok(())
}
