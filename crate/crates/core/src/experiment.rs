//! End-to-end runs on in-memory corpora: subject split, training, and
//! evaluation in both sorted and shuffled modes.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use crate::config::RunConfig;
use crate::dataset::{gallery_probe_split, lt_partition, DatasetIndex, IndexRecord, PoseSequence, SequenceKey, TrainSet};
use crate::error::Result;
use crate::eval::{evaluate_protocol, EvalConfig, EvalMode, EvalSet, ProtocolResult};
use crate::model::GaitModel;
use crate::skeleton::SkeletonTopology;
use crate::train::Trainer;
use crate::weights::save_weights;

/// Training sequences of the first subjects and the evaluation sets of the rest.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Vec<PoseSequence>,
    pub eval: EvalSet,
}

/// Same subject partition and gallery/probe assignment as an on-disk corpus.
pub fn split_corpus(corpus: &[PoseSequence]) -> Result<CorpusSplit> {
    let index = DatasetIndex::from_records(
        corpus
            .iter()
            .map(|s| IndexRecord { key: s.key, path: Default::default() })
            .collect(),
    )?;
    let (train, test) = lt_partition(&index);
    let split = gallery_probe_split(&test);
    let pick = |idx: &DatasetIndex| -> Vec<PoseSequence> {
        let keys: BTreeSet<SequenceKey> = idx.records.iter().map(|r| r.key).collect();
        corpus.iter().filter(|s| keys.contains(&s.key)).cloned().collect()
    };
    let probes: BTreeMap<_, _> = split.probes.iter().map(|(c, i)| (*c, pick(i))).collect();
    Ok(CorpusSplit {
        train: pick(&train),
        eval: EvalSet {
            gallery: pick(&split.gallery),
            probes,
        },
    })
}

pub struct RunOutcome {
    pub trainer: Trainer,
    /// Serialized final weights.
    pub weights: Vec<u8>,
    pub sort: ProtocolResult,
    pub shuffle: ProtocolResult,
    pub train_time: Duration,
}

/// Trains on the training subjects of `corpus` under `config`, then scores
/// the held-out subjects with ordered and with shuffled clips.
pub fn run_experiment(config: &RunConfig, corpus: &[PoseSequence]) -> Result<RunOutcome> {
    config.validate()?;
    let split = split_corpus(corpus)?;
    let spec = config.model.spec()?;
    let topology = SkeletonTopology::coco17();
    let model = GaitModel::new(&spec, &topology, config.seed)?;
    let set = TrainSet::new(split.train, config.train.min_frames.max(spec.min_frames()));
    let mut trainer = Trainer::new(model, config.train.clone(), config.augment.clone(), topology)?;
    let start = Instant::now();
    trainer.fit(&set, None)?;
    let train_time = start.elapsed();
    let score = |mode| {
        evaluate_protocol(
            &trainer.model,
            &split.eval,
            &EvalConfig { mode, ..config.eval.clone() },
        )
    };
    let sort = score(EvalMode::Sort)?;
    let shuffle = score(EvalMode::Shuffle)?;
    Ok(RunOutcome {
        weights: save_weights(&trainer.model),
        trainer,
        sort,
        shuffle,
        train_time,
    })
}
