//! Test-time embedding, nearest-neighbor retrieval and the cross-view
//! rank-1 protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{eval_view, reverse_time, shuffle_frames};
use crate::dataset::{Condition, PoseSequence, SequenceKey};
use crate::error::{Error, Result};
use crate::model::GaitModel;
use crate::nn::Module;
use crate::tensor::Tensor;

/// Sequences per forward pass during embedding.
pub const EMBED_CHUNK: usize = 32;

/// Mean of the embeddings of each clip and its time reversal, renormalized.
/// Clips must already be windowed and normalized, all of equal length.
pub fn embed_clips(model: &GaitModel<f32>, clips: &[PoseSequence]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(EMBED_CHUNK) {
        let frames = chunk[0].num_frames();
        let joints = chunk[0].joints();
        let mut data = Vec::with_capacity(2 * chunk.len() * frames * joints * 3);
        for clip in chunk {
            if clip.num_frames() != frames {
                return Err(Error::Shape("clips in one batch must share a length".into()));
            }
            data.extend(clip.data().iter().map(|&v| v as f32));
        }
        for clip in chunk {
            data.extend(reverse_time(clip).data().iter().map(|&v| v as f32));
        }
        let x = Tensor::from_vec(&[2 * chunk.len(), frames, joints, 3], data)?;
        let y = model.infer(&x)?;
        let d = y.shape()[1];
        let n = chunk.len();
        for i in 0..n {
            let fwd = &y.data()[i * d..(i + 1) * d];
            let rev = &y.data()[(n + i) * d..(n + i + 1) * d];
            let mut v: Vec<f32> = fwd.iter().zip(rev).map(|(a, b)| 0.5 * (a + b)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
            v.iter_mut().for_each(|x| *x /= norm);
            out.push(v);
        }
    }
    Ok(out)
}

/// Embeds one raw sequence through the evaluation view.
pub fn embed_sequence(model: &GaitModel<f32>, seq: &PoseSequence, window: usize) -> Result<Vec<f32>> {
    Ok(embed_clips(model, &[eval_view(seq, window)?])?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub key: SequenceKey,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingGallery {
    pub entries: Vec<Embedding>,
}

impl EmbeddingGallery {
    pub fn new(entries: Vec<Embedding>) -> Result<Self> {
        for e in &entries {
            let norm = e.feature.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Contract(format!("embedding of {} has norm {norm}", e.key)));
            }
        }
        Ok(EmbeddingGallery { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn views(&self) -> BTreeSet<u32> {
        self.entries.iter().map(|e| e.key.view).collect()
    }
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Index of the nearest candidate; ties go to the lowest index.
pub fn nearest<'a>(query: &[f32], candidates: impl Iterator<Item = (usize, &'a [f32])>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates {
        let d = euclidean(query, c);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Rank-1 accuracy (percent) per probe view, averaged over every other view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub views: Vec<u32>,
    /// One cell per view; `None` where no probes of that view exist.
    pub accuracy: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// For probe view `p` and every gallery view `g != p`, classifies each probe
/// by its nearest gallery entry of view `g`; the cell averages the per-`g`
/// accuracies.
pub fn rank1_cross_view(gallery: &EmbeddingGallery, probes: &EmbeddingGallery) -> Result<AccuracyTable> {
    let views: Vec<u32> = gallery.views().union(&probes.views()).copied().collect();
    let mut by_view: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, e) in gallery.entries.iter().enumerate() {
        by_view.entry(e.key.view).or_default().push(i);
    }
    let cells: Vec<Result<Option<f64>>> = views
        .par_iter()
        .map(|&p| {
            let probe_idx: Vec<&Embedding> = probes.entries.iter().filter(|e| e.key.view == p).collect();
            if probe_idx.is_empty() {
                return Ok(None);
            }
            let mut accs = Vec::new();
            for &g in views.iter().filter(|&&g| g != p) {
                let cands = by_view
                    .get(&g)
                    .ok_or_else(|| Error::Protocol(format!("gallery has no sequences at view {g}")))?;
                let correct = probe_idx
                    .iter()
                    .filter(|probe| {
                        let hit = nearest(
                            &probe.feature,
                            cands.iter().map(|&i| (i, gallery.entries[i].feature.as_slice())),
                        )
                        .expect("non-empty view");
                        gallery.entries[hit].key.subject == probe.key.subject
                    })
                    .count();
                accs.push(100.0 * correct as f64 / probe_idx.len() as f64);
            }
            Ok((!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64))
        })
        .collect();
    let accuracy = cells.into_iter().collect::<Result<Vec<_>>>()?;
    let present: Vec<f64> = accuracy.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(AccuracyTable { views, accuracy, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Sort,
    Shuffle,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Sort => "sort",
            EvalMode::Shuffle => "shuffle",
        })
    }
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sort" => Ok(EvalMode::Sort),
            "shuffle" => Ok(EvalMode::Shuffle),
            _ => Err(format!("unknown mode {s:?}, expected sort or shuffle")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    /// In shuffle mode, leave gallery sequences in temporal order.
    pub probes_only: bool,
    pub window: usize,
    /// Set from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Sort,
            probes_only: false,
            window: 60,
            seed: 0,
        }
    }
}

/// Gallery and probe sequences of the test subjects.
#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    pub gallery: Vec<PoseSequence>,
    pub probes: BTreeMap<Condition, Vec<PoseSequence>>,
}

fn key_stream(k: &SequenceKey) -> u64 {
    let c = match k.condition {
        Condition::Nm => 0,
        Condition::Bg => 1,
        Condition::Cl => 2,
    };
    (((k.subject as u64 * 4 + c) * 100 + k.seq as u64) * 1000) + k.view as u64
}

fn prepare(seqs: &[PoseSequence], window: usize, shuffle: Option<u64>) -> Result<Vec<PoseSequence>> {
    seqs.par_iter()
        .map(|s| {
            let clip = eval_view(s, window)?;
            Ok(match shuffle {
                Some(seed) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(key_stream(&s.key));
                    shuffle_frames(&clip, &mut rng)
                }
                None => clip,
            })
        })
        .collect()
}

pub fn embed_set(model: &GaitModel<f32>, seqs: &[PoseSequence], window: usize, shuffle: Option<u64>) -> Result<EmbeddingGallery> {
    let clips = prepare(seqs, window, shuffle)?;
    if clips.is_empty() {
        return Ok(EmbeddingGallery::default());
    }
    let features = embed_clips(model, &clips)?;
    EmbeddingGallery::new(
        clips
            .iter()
            .zip(features)
            .map(|(c, feature)| Embedding { key: c.key, feature })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub mode: EvalMode,
    pub tables: BTreeMap<Condition, AccuracyTable>,
}

/// Embeds the gallery and each probe set and scores them. Conditions with
/// no probes are skipped with a warning.
pub fn evaluate_protocol(model: &GaitModel<f32>, set: &EvalSet, config: &EvalConfig) -> Result<ProtocolResult> {
    let shuffle = (config.mode == EvalMode::Shuffle).then_some(config.seed);
    let gallery_shuffle = if config.probes_only { None } else { shuffle };
    let gallery = embed_set(model, &set.gallery, config.window, gallery_shuffle)?;
    if gallery.is_empty() {
        return Err(Error::Protocol("gallery is empty".into()));
    }
    let mut tables = BTreeMap::new();
    for c in Condition::ALL {
        let Some(seqs) = set.probes.get(&c).filter(|s| !s.is_empty()) else {
            log::warn!("no {} probes, skipping", c.label());
            continue;
        };
        let probes = embed_set(model, seqs, config.window, shuffle)?;
        tables.insert(c, rank1_cross_view(&gallery, &probes)?);
    }
    Ok(ProtocolResult { mode: config.mode, tables })
}

impl ProtocolResult {
    /// Aligned text: one row per condition, one column per view, then the mean.
    pub fn to_text(&self) -> String {
        let views: BTreeSet<u32> = self.tables.values().flat_map(|t| t.views.iter().copied()).collect();
        let mut s = format!("mode: {}\n{:<6}", self.mode, "Probe");
        for v in &views {
            let _ = write!(s, "{:>7}", format!("{v}°"));
        }
        let _ = writeln!(s, "{:>7}", "mean");
        let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
        for (c, t) in &self.tables {
            let _ = write!(s, "{:<6}", c.label());
            for v in &views {
                let cell = t.views.iter().position(|x| x == v).and_then(|i| t.accuracy[i]);
                let _ = write!(s, "{:>7}", fmt(cell));
            }
            let _ = writeln!(s, "{:>7}", fmt(t.mean));
        }
        s
    }

    pub fn condition_means(&self) -> Vec<(Condition, Option<f64>)> {
        self.tables.iter().map(|(c, t)| (*c, t.mean)).collect()
    }
}

/// Full probe x gallery Euclidean distance matrix as CSV.
pub fn distance_csv(gallery: &EmbeddingGallery, probes: &EmbeddingGallery) -> String {
    let mut s = String::from("probe");
    for g in &gallery.entries {
        let _ = write!(s, ",{}", g.key);
    }
    s.push('\n');
    let rows: Vec<String> = probes
        .entries
        .par_iter()
        .map(|p| {
            let mut row = p.key.to_string();
            for g in &gallery.entries {
                let _ = write!(row, ",{:.6}", euclidean(&p.feature, &g.feature));
            }
            row.push('\n');
            row
        })
        .collect();
    s.extend(rows);
    s
}
