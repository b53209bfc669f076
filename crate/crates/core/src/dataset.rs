//! Pose files, corpus indexing, the train/test and gallery/probe splits, and
//! contrastive batch sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{train_view, AugmentConfig};
use crate::error::{Error, Result};
use crate::skeleton::SkeletonTopology;
use crate::tensor::Tensor;

pub const NUM_JOINTS: usize = 17;
pub const CSV_COLUMNS: usize = 1 + NUM_JOINTS * 3;
pub const VIEWS: [u32; 11] = [0, 18, 36, 54, 72, 90, 108, 126, 144, 162, 180];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Nm,
    Bg,
    Cl,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Nm, Condition::Bg, Condition::Cl];

    /// Sequences recorded per subject and view.
    pub fn sequences(self) -> u32 {
        match self {
            Condition::Nm => 6,
            Condition::Bg | Condition::Cl => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Condition::Nm => "NM",
            Condition::Bg => "BG",
            Condition::Cl => "CL",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Nm => "nm",
            Condition::Bg => "bg",
            Condition::Cl => "cl",
        })
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "nm" => Ok(Condition::Nm),
            "bg" => Ok(Condition::Bg),
            "cl" => Ok(Condition::Cl),
            _ => Err(format!("unknown condition {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SequenceKey {
    pub subject: u32,
    pub condition: Condition,
    pub seq: u32,
    pub view: u32,
}

impl SequenceKey {
    pub fn file_name(&self) -> String {
        format!("{:03}-{}-{:02}-{:03}.csv", self.subject, self.condition, self.seq, self.view)
    }

    /// Parses `SSS-cc-NN-VVV.csv`.
    pub fn from_file_name(name: &str) -> Option<Self> {
        let stem = name.strip_suffix(".csv")?;
        let parts: Vec<&str> = stem.split('-').collect();
        let [s, c, n, v] = parts.as_slice() else { return None };
        Self::from_parts(s, c, n, v)
    }

    /// Parses either the flat file name or the `SSS/cc-NN/VVV.csv` layout.
    pub fn from_path(path: &Path) -> Option<Self> {
        let name = path.file_name()?.to_str()?;
        if let Some(k) = Self::from_file_name(name) {
            return Some(k);
        }
        let view = name.strip_suffix(".csv")?;
        let mut dirs = path.parent()?.iter().rev();
        let cond_seq = dirs.next()?.to_str()?;
        let subject = dirs.next()?.to_str()?;
        let (c, n) = cond_seq.split_once('-')?;
        Self::from_parts(subject, c, n, view)
    }

    fn from_parts(s: &str, c: &str, n: &str, v: &str) -> Option<Self> {
        let digits = |x: &str, len: usize| x.len() == len && x.bytes().all(|b| b.is_ascii_digit());
        if !(digits(s, 3) && digits(n, 2) && digits(v, 3)) {
            return None;
        }
        Some(SequenceKey {
            subject: s.parse().ok()?,
            condition: c.parse().ok()?,
            seq: n.parse().ok()?,
            view: v.parse().ok()?,
        })
    }
}

impl fmt::Display for SequenceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:03}-{}-{:02}-{:03}", self.subject, self.condition, self.seq, self.view)
    }
}

/// A `T x N x 3` sequence of (x, y, confidence) per joint, with its key.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub key: SequenceKey,
    joints: usize,
    data: Vec<f64>,
}

impl PoseSequence {
    pub fn new(key: SequenceKey, joints: usize, data: Vec<f64>) -> Result<Self> {
        if joints == 0 || data.len() % (joints * 3) != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form frames of {joints} joints x 3",
                data.len()
            )));
        }
        Ok(PoseSequence { key, joints, data })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / (self.joints * 3)
    }

    /// Frame-major values, `[t][joint][x, y, confidence]`.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.joints * 3..(t + 1) * self.joints * 3]
    }

    /// Same key and joint count with new frame data.
    pub fn with_data(&self, data: Vec<f64>) -> PoseSequence {
        debug_assert_eq!(data.len() % (self.joints * 3), 0);
        PoseSequence {
            key: self.key,
            joints: self.joints,
            data,
        }
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(&[self.num_frames(), self.joints, 3], self.data.clone()).expect("consistent shape")
    }
}

/// Reads frame rows of `frame_index, x0, y0, c0, ..., x16, y16, c16`.
/// Blank lines are ignored; rows are numbered from 1.
pub fn parse_pose_csv(text: &str) -> Result<Vec<f64>> {
    let mut data = Vec::new();
    let rows = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    for (i, line) in rows {
        let row = i + 1;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != CSV_COLUMNS {
            return Err(Error::Parse {
                row,
                message: format!(
                    "expected {NUM_JOINTS} joints ({CSV_COLUMNS} values per row), found {} values",
                    cells.len()
                ),
            });
        }
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                message: format!("column {}: {cell:?} is not a number", col + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("column {}: non-finite value", col + 1),
                });
            }
            if col == 0 {
                continue;
            }
            if col % 3 == 0 && !(0.0..=1.0).contains(&v) {
                return Err(Error::Parse {
                    row,
                    message: format!("column {}: confidence {v} outside [0, 1]", col + 1),
                });
            }
            data.push(v);
        }
    }
    Ok(data)
}

pub fn write_pose_csv(seq: &PoseSequence) -> String {
    let mut out = String::new();
    for t in 0..seq.num_frames() {
        out.push_str(&t.to_string());
        for v in seq.frame(t) {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    out
}

pub fn read_sequence(path: &Path, key: SequenceKey) -> Result<PoseSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let data = parse_pose_csv(&text)?;
    if data.is_empty() {
        return Err(Error::DegenerateSequence(format!("{} has no frames", path.display())));
    }
    PoseSequence::new(key, NUM_JOINTS, data)
}

pub fn write_sequence(dir: &Path, seq: &PoseSequence) -> Result<PathBuf> {
    let path = dir.join(seq.key.file_name());
    fs::write(&path, write_pose_csv(seq)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub key: SequenceKey,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    /// Sorted by key; keys are unique.
    pub records: Vec<IndexRecord>,
}

impl DatasetIndex {
    pub fn from_records(mut records: Vec<IndexRecord>) -> Result<Self> {
        records.sort_by_key(|r| r.key);
        let dups: Vec<String> = records
            .windows(2)
            .filter(|w| w[0].key == w[1].key)
            .map(|w| format!("{} (duplicate key {})", w[1].path.display(), w[1].key))
            .collect();
        if !dups.is_empty() {
            return Err(Error::Indexing(dups));
        }
        Ok(DatasetIndex { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subjects(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.records.iter().map(|r| r.key.subject).collect();
        set.into_iter().collect()
    }

    pub fn filter(&self, keep: impl Fn(&SequenceKey) -> bool) -> DatasetIndex {
        DatasetIndex {
            records: self.records.iter().filter(|r| keep(&r.key)).cloned().collect(),
        }
    }

    /// Expected keys (11 views, NM 1-6, BG 1-2, CL 1-2 per subject) absent from the index.
    pub fn missing(&self) -> Vec<SequenceKey> {
        let have: BTreeSet<SequenceKey> = self.records.iter().map(|r| r.key).collect();
        let mut out = Vec::new();
        for subject in self.subjects() {
            for condition in Condition::ALL {
                for seq in 1..=condition.sequences() {
                    for view in VIEWS {
                        let k = SequenceKey { subject, condition, seq, view };
                        if !have.contains(&k) {
                            out.push(k);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn collect_csv(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_csv(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "csv") {
            out.push(path);
        }
    }
    Ok(())
}

/// Every `.csv` file below `root`, sorted.
pub fn list_pose_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    collect_csv(root, &mut files)?;
    files.sort();
    Ok(files)
}

/// Indexes every `.csv` file below `root`. Files whose names do not follow
/// the naming convention make the whole call fail, listing all offenders.
pub fn index_corpus(root: &Path) -> Result<DatasetIndex> {
    let files = list_pose_files(root)?;
    let mut records = Vec::new();
    let mut bad = Vec::new();
    for path in files {
        match SequenceKey::from_path(&path) {
            Some(key) => records.push(IndexRecord { key, path }),
            None => bad.push(path.display().to_string()),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Indexing(bad));
    }
    if records.is_empty() {
        log::warn!("no pose files found under {}", root.display());
    }
    DatasetIndex::from_records(records)
}

/// Number of training subjects: 74 for the 124-subject corpus, otherwise
/// the first 60% (rounded up).
pub fn lt_train_count(subjects: usize) -> usize {
    if subjects == 124 {
        74
    } else {
        (subjects * 3).div_ceil(5)
    }
}

/// Splits by subject id: the lowest ids train, the rest test.
pub fn lt_partition(index: &DatasetIndex) -> (DatasetIndex, DatasetIndex) {
    let subjects = index.subjects();
    let train: BTreeSet<u32> = subjects.iter().take(lt_train_count(subjects.len())).copied().collect();
    (
        index.filter(|k| train.contains(&k.subject)),
        index.filter(|k| !train.contains(&k.subject)),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryProbeSplit {
    pub gallery: DatasetIndex,
    pub probes: BTreeMap<Condition, DatasetIndex>,
}

/// Gallery NM 1-4; probes NM 5-6, BG 1-2, CL 1-2.
pub fn gallery_probe_split(test: &DatasetIndex) -> GalleryProbeSplit {
    let gallery = test.filter(|k| k.condition == Condition::Nm && (1..=4).contains(&k.seq));
    let probes = Condition::ALL
        .into_iter()
        .map(|c| {
            let seqs = if c == Condition::Nm { 5..=6 } else { 1..=2 };
            (c, test.filter(|k| k.condition == c && seqs.contains(&k.seq)))
        })
        .collect();
    GalleryProbeSplit { gallery, probes }
}

/// Reads every indexed sequence, in index order.
pub fn load_sequences(index: &DatasetIndex) -> Result<Vec<PoseSequence>> {
    index
        .records
        .par_iter()
        .map(|r| read_sequence(&r.path, r.key))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `B x T x N x 3`
    pub features: Tensor<f32>,
    pub labels: Vec<u32>,
    pub views: Vec<u32>,
}

/// Training sequences grouped by subject.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub subjects: Vec<(u32, Vec<PoseSequence>)>,
}

impl TrainSet {
    /// Groups sequences by subject, dropping those shorter than `min_frames`.
    pub fn new(sequences: Vec<PoseSequence>, min_frames: usize) -> Self {
        let mut groups: BTreeMap<u32, Vec<PoseSequence>> = BTreeMap::new();
        for s in sequences {
            if s.num_frames() < min_frames {
                log::warn!("excluding {} from training: {} frames", s.key, s.num_frames());
                continue;
            }
            groups.entry(s.key.subject).or_default().push(s);
        }
        TrainSet {
            subjects: groups.into_iter().collect(),
        }
    }

    pub fn num_sequences(&self) -> usize {
        self.subjects.iter().map(|(_, s)| s.len()).sum()
    }
}

/// `P` subjects x `K` sequences, each contributing two independent
/// augmented views with the subject label.
pub fn sample_batch<R: Rng + ?Sized>(
    set: &TrainSet,
    p: usize,
    k: usize,
    augment: &AugmentConfig,
    topology: &SkeletonTopology,
    rng: &mut R,
) -> Result<Batch> {
    if p == 0 || k == 0 {
        return Err(Error::Config("P and K must be positive".into()));
    }
    if set.subjects.len() < p {
        return Err(Error::DegenerateBatch(format!(
            "batch needs {p} subjects, training set has {}",
            set.subjects.len()
        )));
    }
    let mut draws = Vec::with_capacity(p * k * 2);
    for s in sample(rng, set.subjects.len(), p).into_vec() {
        let seqs = &set.subjects[s].1;
        let picks: Vec<usize> = if seqs.len() >= k {
            sample(rng, seqs.len(), k).into_vec()
        } else {
            (0..k).map(|_| rng.random_range(0..seqs.len())).collect()
        };
        for i in picks {
            for _ in 0..2 {
                draws.push((&seqs[i], rng.random::<u64>()));
            }
        }
    }
    let views: Vec<PoseSequence> = draws
        .par_iter()
        .map(|(seq, seed)| train_view(seq, augment, topology, &mut ChaCha8Rng::seed_from_u64(*seed)))
        .collect::<Result<_>>()?;
    let joints = topology.num_joints();
    let mut data = Vec::with_capacity(views.len() * augment.window * joints * 3);
    for v in &views {
        data.extend(v.data().iter().map(|&x| x as f32));
    }
    Ok(Batch {
        features: Tensor::from_vec(&[views.len(), augment.window, joints, 3], data)?,
        labels: views.iter().map(|v| v.key.subject).collect(),
        views: views.iter().map(|v| v.key.view).collect(),
    })
}
