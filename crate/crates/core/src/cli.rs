//! Command-line front end: argument definitions and the six commands.
//! Results go to the `out` writer; diagnostics go to the log (stderr).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::Value;

use crate::config::RunConfig;
use crate::dataset::{
    gallery_probe_split, list_pose_files, load_sequences, lt_partition, read_sequence, Condition, DatasetIndex,
    IndexRecord, SequenceKey, TrainSet,
};
use crate::error::{Error, Result};
use crate::eval::{distance_csv, embed_sequence, embed_set, evaluate_protocol, EvalMode, EvalSet};
use crate::gradcheck::layer_suite;
use crate::model::{shape_trace, GaitModel};
use crate::skeleton::SkeletonTopology;
use crate::synthetic::{write_corpus, SyntheticConfig};
use crate::train::{Cycle, Trainer};
use crate::weights::{load_weights, load_weights_into, WeightFile};

pub const THREADS_ENV: &str = "GAITGRAPH_THREADS";
pub const INDEX_FILE: &str = "index.json";
pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "gaitgraph", version, about = "Skeleton-based gait embeddings")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Flat dotted-key JSON configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for indexes, checkpoints and reports.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads (falls back to GAITGRAPH_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Configuration override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Index a corpus and report what it contains.
    Prepare(PrepareArgs),
    /// Train on the training subjects of the prepared index.
    Train(TrainArgs),
    /// Cross-view rank-1 evaluation on the test subjects.
    Evaluate(EvaluateArgs),
    /// Print the embedding of one sequence as a JSON array.
    Embed(EmbedArgs),
    /// Finite-difference check of every layer.
    Gradcheck(GradcheckArgs),
    /// Print the shape trace of the configured network.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct PrepareArgs {
    /// Corpus root; overrides the `corpus` key.
    pub corpus: Option<PathBuf>,
    /// Generate a synthetic corpus with this many subjects into the root first.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<u32>,
    /// Synthetic subjects differ only in gait timing.
    #[arg(long, requires = "synthetic")]
    pub temporal_only: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Cycles as EPOCHS:MAX_LR pairs, e.g. `300:0.01,100:1e-5`.
    #[arg(long)]
    pub cycles: Option<String>,
    #[arg(long)]
    pub epochs_scale: Option<f64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Index file; defaults to `<out>/index.json`.
    #[arg(long)]
    pub index: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvaluateArgs {
    /// Defaults to `<out>/weights.ggw`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<EvalMode>,
    /// Shuffle probes only, keeping the gallery in order.
    #[arg(long)]
    pub probes_only: bool,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Also write the probe x gallery distance matrix (all probe conditions).
    #[arg(long, value_name = "PATH")]
    pub distances: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub weights: PathBuf,
    pub sequence: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GradcheckArgs {}

#[derive(Debug, Clone, Default, Args)]
pub struct InspectArgs {
    /// Clip length; defaults to `augment.window`.
    #[arg(long)]
    pub frames: Option<usize>,
}

/// Parses `E:LR,E:LR`.
pub fn parse_cycles(text: &str) -> Result<Vec<Cycle>> {
    text.split(',')
        .map(|part| {
            let (e, lr) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("cycle {part:?} is not EPOCHS:LR")))?;
            let epochs = e.trim().parse().map_err(|_| Error::Config(format!("bad epoch count {e:?}")))?;
            let max_lr = lr.trim().parse().map_err(|_| Error::Config(format!("bad learning rate {lr:?}")))?;
            Ok(Cycle { epochs, max_lr })
        })
        .collect()
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
pub fn resolve_config(global: &GlobalArgs, flags: Vec<(&str, Value)>) -> Result<RunConfig> {
    let mut config = match &global.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    config = config.with_assignments(&global.set)?;
    let mut overrides = flags;
    if let Some(seed) = global.seed {
        overrides.push(("seed", Value::from(seed)));
    }
    if let Some(out) = &global.out {
        overrides.push(("out", Value::from(out.display().to_string())));
    }
    config.with_overrides(overrides)
}

/// `--threads`, else `GAITGRAPH_THREADS`, else rayon's default.
pub fn configure_threads(threads: Option<usize>) -> Result<()> {
    let from_env = || std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok());
    if let Some(n) = threads.or_else(from_env) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    configure_threads(cli.global.threads)?;
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&cli.global, &a, out),
        Command::Train(a) => cmd_train(&cli.global, &a, out),
        Command::Evaluate(a) => cmd_evaluate(&cli.global, &a, out),
        Command::Embed(a) => cmd_embed(&a, out),
        Command::Gradcheck(_) => cmd_gradcheck(&cli.global, out),
        Command::Inspect(a) => cmd_inspect(&cli.global, &a, out),
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io(Path::new("<stdout>"), e)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Corpus summary produced by `prepare`.
#[derive(Debug, Clone, Default)]
pub struct CorpusReport {
    pub index: DatasetIndex,
    /// Files that could not be indexed, with the reason.
    pub malformed: Vec<(PathBuf, String)>,
    /// Indexed sequences too short to be used for training.
    pub short: Vec<(SequenceKey, usize)>,
}

impl CorpusReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("sequences: {}\nsubjects: {}\n", self.index.len(), self.index.subjects().len());
        let mut per_subject: BTreeMap<u32, BTreeMap<Condition, usize>> = BTreeMap::new();
        let mut per_view: BTreeMap<u32, usize> = BTreeMap::new();
        for r in &self.index.records {
            *per_subject.entry(r.key.subject).or_default().entry(r.key.condition).or_default() += 1;
            *per_view.entry(r.key.view).or_default() += 1;
        }
        for (subject, counts) in &per_subject {
            s.push_str(&format!("subject {subject:03}:"));
            for c in Condition::ALL {
                s.push_str(&format!(" {}={}", c.label(), counts.get(&c).copied().unwrap_or(0)));
            }
            s.push('\n');
        }
        if !per_view.is_empty() {
            s.push_str("views:");
            for (v, n) in &per_view {
                s.push_str(&format!(" {v:03}={n}"));
            }
            s.push('\n');
        }
        s.push_str(&format!("short sequences excluded from training: {}\n", self.short.len()));
        for (k, frames) in &self.short {
            s.push_str(&format!("  {k} ({frames} frames)\n"));
        }
        s.push_str(&format!("malformed files: {}\n", self.malformed.len()));
        for (p, why) in &self.malformed {
            s.push_str(&format!("  {}: {why}\n", p.display()));
        }
        s
    }
}

/// Parses every pose file under `root` in parallel. Unparseable files are
/// reported, not fatal.
pub fn scan_corpus(root: &Path, min_frames: usize) -> Result<CorpusReport> {
    let files = list_pose_files(root)?;
    let results: Vec<(PathBuf, std::result::Result<(SequenceKey, usize), String>)> = files
        .into_par_iter()
        .map(|path| {
            let outcome = match SequenceKey::from_path(&path) {
                None => Err("file name does not match SSS-cc-NN-VVV.csv".to_string()),
                Some(key) => read_sequence(&path, key).map(|s| (key, s.num_frames())).map_err(|e| e.to_string()),
            };
            (path, outcome)
        })
        .collect();
    let mut report = CorpusReport::default();
    let mut records = Vec::new();
    for (path, outcome) in results {
        match outcome {
            Ok((key, frames)) => {
                if frames < min_frames {
                    report.short.push((key, frames));
                }
                records.push(IndexRecord { key, path });
            }
            Err(why) => report.malformed.push((path, why)),
        }
    }
    report.index = DatasetIndex::from_records(records)?;
    report.short.sort();
    Ok(report)
}

pub fn cmd_prepare(global: &GlobalArgs, args: &PrepareArgs, out: &mut dyn Write) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(root) = &args.corpus {
        flags.push(("corpus", Value::from(root.display().to_string())));
    }
    let config = resolve_config(global, flags)?;
    let root = config
        .corpus
        .clone()
        .ok_or_else(|| Error::Config("no corpus directory given".into()))?;
    if let Some(subjects) = args.synthetic {
        let synth = SyntheticConfig {
            subjects,
            temporal_only: args.temporal_only,
            seed: config.seed,
            ..Default::default()
        };
        write_corpus(&synth, &root)?;
        log::info!("wrote {subjects}-subject synthetic corpus to {}", root.display());
    }
    config.validate()?;
    let report = scan_corpus(&root, config.train.min_frames)?;
    create_dir(&config.out)?;
    report.index.save(&config.out.join(INDEX_FILE))?;
    out.write_all(report.to_text().as_bytes()).map_err(io_err)?;
    if report.index.is_empty() {
        return Err(Error::Indexing(vec![format!("no usable sequences under {}", root.display())]));
    }
    Ok(())
}

fn load_index(config: &RunConfig, explicit: Option<&Path>) -> Result<DatasetIndex> {
    let path = explicit.map_or_else(|| config.out.join(INDEX_FILE), Path::to_path_buf);
    if path.exists() {
        return DatasetIndex::load(&path);
    }
    match &config.corpus {
        Some(root) => {
            log::warn!("{} not found, indexing {} directly", path.display(), root.display());
            crate::dataset::index_corpus(root)
        }
        None => Err(Error::Config(format!("no index at {} and no corpus configured; run prepare", path.display()))),
    }
}

/// Human-readable summary of the training protocol.
pub fn config_echo(config: &RunConfig) -> String {
    let t = &config.train;
    let cycles: Vec<String> = t
        .cycles
        .iter()
        .map(|c| format!("({}, {:e}) -> {} epochs", c.epochs, c.max_lr, t.cycle_epochs(c)))
        .collect();
    format!(
        "batch {} ({} subjects x {} sequences x 2 views), temperature {}, weight decay {:e}, cycles {}, epochs scale {}, seed {}",
        t.batch_size(),
        t.subjects_per_batch,
        t.sequences_per_subject,
        t.temperature,
        t.weight_decay,
        cycles.join(", "),
        t.epochs_scale,
        config.seed
    )
}

/// Trains on the LT training subjects. Returns the trainer for inspection.
pub fn train_run(config: &RunConfig, index: &DatasetIndex, resume: bool) -> Result<Trainer> {
    config.validate()?;
    let (train_index, _) = lt_partition(index);
    let spec = config.model.spec()?;
    let set = TrainSet::new(load_sequences(&train_index)?, config.train.min_frames.max(spec.min_frames()));
    let topology = SkeletonTopology::coco17();
    let model = GaitModel::new(&spec, &topology, config.seed)?;
    let mut trainer = Trainer::new(model, config.train.clone(), config.augment.clone(), topology)?;
    create_dir(&config.out)?;
    fs::write(config.out.join(CONFIG_SNAPSHOT), config.to_json()).map_err(|e| Error::io(&config.out, e))?;
    if resume {
        trainer.resume(&config.out)?;
        log::info!("resumed at epoch {} step {}", trainer.epoch, trainer.step);
    }
    trainer.fit(&set, Some(&config.out))?;
    Ok(trainer)
}

pub fn cmd_train(global: &GlobalArgs, args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(text) = &args.cycles {
        flags.push(("train.cycles", serde_json::to_value(parse_cycles(text)?)?));
    }
    if let Some(scale) = args.epochs_scale {
        flags.push(("train.epochs_scale", Value::from(scale)));
    }
    let config = resolve_config(global, flags)?;
    eprintln!("{}", config_echo(&config));
    let index = load_index(&config, args.index.as_deref())?;
    let start = Instant::now();
    let trainer = train_run(&config, &index, args.resume)?;
    let last = trainer.history.last().map_or(f64::NAN, |r| r.loss);
    writeln!(
        out,
        "trained {} epochs ({} steps) in {:.1}s, final loss {last:.5}, weights {}",
        trainer.epoch,
        trainer.step,
        start.elapsed().as_secs_f64(),
        config.out.join("weights.ggw").display()
    )
    .map_err(io_err)
}

/// Loads the test-subject gallery and probes of `index`.
pub fn eval_set(index: &DatasetIndex) -> Result<EvalSet> {
    let (_, test) = lt_partition(index);
    let split = gallery_probe_split(&test);
    let mut probes = BTreeMap::new();
    for (c, idx) in &split.probes {
        probes.insert(*c, load_sequences(idx)?);
    }
    Ok(EvalSet {
        gallery: load_sequences(&split.gallery)?,
        probes,
    })
}

/// Reads a weight file whose architecture must match `config`.
pub fn load_checked_weights(config: &RunConfig, path: &Path) -> Result<GaitModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let spec = config.model.spec()?;
    let header = WeightFile::from_bytes(&bytes)?.header;
    if header.spec_hash != spec.hash() {
        return Err(Error::SpecMismatch {
            expected: spec.hash(),
            found: header.spec_hash,
        });
    }
    let mut model = GaitModel::new(&spec, &SkeletonTopology::coco17(), 0)?;
    load_weights_into(&mut model, &bytes)?;
    Ok(model)
}

pub fn cmd_evaluate(global: &GlobalArgs, args: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(mode) = args.mode {
        flags.push(("eval.mode", Value::from(mode.to_string())));
    }
    if args.probes_only {
        flags.push(("eval.probes_only", Value::from(true)));
    }
    let config = resolve_config(global, flags)?;
    let weights = args.weights.clone().unwrap_or_else(|| config.out.join("weights.ggw"));
    let model = load_checked_weights(&config, &weights)?;
    let set = eval_set(&load_index(&config, args.index.as_deref())?)?;
    create_dir(&config.out)?;

    let mut modes = vec![EvalMode::Sort];
    if config.eval.mode == EvalMode::Shuffle {
        modes.push(EvalMode::Shuffle);
    }
    for mode in modes {
        let eval = crate::eval::EvalConfig { mode, ..config.eval.clone() };
        let result = evaluate_protocol(&model, &set, &eval)?;
        writeln!(out, "{}", result.to_text()).map_err(io_err)?;
        let path = config.out.join(format!("eval_{mode}.json"));
        fs::write(&path, serde_json::to_string_pretty(&result)?).map_err(|e| Error::io(&path, e))?;
    }
    if let Some(path) = &args.distances {
        let gallery = embed_set(&model, &set.gallery, config.eval.window, None)?;
        let all: Vec<_> = set.probes.values().flatten().cloned().collect();
        let probes = embed_set(&model, &all, config.eval.window, None)?;
        fs::write(path, distance_csv(&gallery, &probes)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn cmd_embed(args: &EmbedArgs, out: &mut dyn Write) -> Result<()> {
    let bytes = fs::read(&args.weights).map_err(|e| Error::io(&args.weights, e))?;
    let model = load_weights(&bytes, &SkeletonTopology::coco17())?;
    let key = SequenceKey::from_path(&args.sequence).unwrap_or(SequenceKey {
        subject: 0,
        condition: Condition::Nm,
        seq: 1,
        view: 0,
    });
    let seq = read_sequence(&args.sequence, key)?;
    let feature = embed_sequence(&model, &seq, crate::augment::AugmentConfig::default().window)?;
    writeln!(out, "{}", serde_json::to_string(&feature)?).map_err(io_err)
}

pub fn cmd_gradcheck(global: &GlobalArgs, out: &mut dyn Write) -> Result<()> {
    let config = resolve_config(global, Vec::new())?;
    let mut failed = Vec::new();
    for check in layer_suite(config.seed)? {
        let err = check.report.max_relative_error();
        let pass = check.report.passes(GRADCHECK_TOLERANCE);
        writeln!(out, "{:<30} max relative error {err:.3e}  {}", check.layer, if pass { "pass" } else { "FAIL" })
            .map_err(io_err)?;
        log::debug!("{}\n{}", check.layer, check.report);
        if !pass {
            failed.push(check.layer);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn cmd_inspect(global: &GlobalArgs, args: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let config = resolve_config(global, Vec::new())?;
    let spec = config.model.spec()?;
    let frames = args.frames.unwrap_or(config.augment.window);
    let rows = shape_trace(&spec, [frames, spec.num_joints, spec.input_channels])?;
    writeln!(out, "{:<8} {:<11} Output dimension", "Block", "Module").map_err(io_err)?;
    for r in rows {
        writeln!(out, "{r}").map_err(io_err)?;
    }
    Ok(())
}
