//! Contrastive training: single steps, multi-cycle fitting with one-cycle
//! schedules, checkpoints and resumption.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::mpsc::sync_channel;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dataset::{sample_batch, Batch, TrainSet};
use crate::error::{Error, Result};
use crate::loss::supcon_loss;
use crate::model::GaitModel;
use crate::nn::Module;
use crate::optim::{Adam, OneCycleSchedule};
use crate::skeleton::SkeletonTopology;
use crate::weights::{load_optimizer, load_weights_into, save_optimizer, save_weights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cycle {
    pub epochs: usize,
    pub max_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub temperature: f64,
    /// Subjects per batch (P).
    pub subjects_per_batch: usize,
    /// Sequences drawn per subject (K); each yields two augmented views.
    pub sequences_per_subject: usize,
    pub cycles: Vec<Cycle>,
    pub weight_decay: f64,
    /// Multiplies every cycle's epoch count (rounded, at least 1).
    pub epochs_scale: f64,
    /// Overrides the one-pass-over-the-data epoch length.
    pub steps_per_epoch: Option<usize>,
    pub checkpoint_every: usize,
    pub min_frames: usize,
    pub pct_up: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    /// Set from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            temperature: 0.01,
            subjects_per_batch: 32,
            sequences_per_subject: 2,
            cycles: vec![
                Cycle { epochs: 300, max_lr: 0.01 },
                Cycle { epochs: 100, max_lr: 1e-5 },
            ],
            weight_decay: 1e-5,
            epochs_scale: 1.0,
            steps_per_epoch: None,
            checkpoint_every: 10,
            min_frames: 10,
            pct_up: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        2 * self.subjects_per_batch * self.sequences_per_subject
    }

    pub fn cycle_epochs(&self, cycle: &Cycle) -> usize {
        ((cycle.epochs as f64 * self.epochs_scale).round() as usize).max(1)
    }

    pub fn total_epochs(&self) -> usize {
        self.cycles.iter().map(|c| self.cycle_epochs(c)).sum()
    }

    /// One pass over the training sequences, `P * K` of them per step.
    pub fn epoch_steps(&self, train_sequences: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| train_sequences.div_ceil(self.subjects_per_batch * self.sequences_per_subject))
            .max(1)
    }

    pub fn schedule(&self, cycle: &Cycle, steps_per_epoch: usize) -> OneCycleSchedule {
        OneCycleSchedule {
            max_lr: cycle.max_lr,
            total_steps: self.cycle_epochs(cycle) * steps_per_epoch,
            pct_up: self.pct_up,
            div_factor: self.div_factor,
            final_div_factor: self.final_div_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.cycles.is_empty() || self.cycles.iter().any(|c| c.epochs == 0) {
            return Err(Error::Config("every cycle needs a positive epoch count".into()));
        }
        if self.subjects_per_batch == 0 || self.sequences_per_subject == 0 {
            return Err(Error::Config("subjects_per_batch and sequences_per_subject must be positive".into()));
        }
        if !(self.epochs_scale > 0.0) {
            return Err(Error::Config("epochs_scale must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        for c in &self.cycles {
            self.schedule(c, 1).validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub epoch: usize,
    pub cycle: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointState {
    epoch: usize,
    step: usize,
    history_len: usize,
    spec_hash: String,
}

pub struct Trainer {
    pub model: GaitModel<f32>,
    pub adam: Adam<f32>,
    pub config: TrainConfig,
    pub augment: AugmentConfig,
    pub topology: SkeletonTopology,
    /// Completed epochs, counted across cycles.
    pub epoch: usize,
    pub step: usize,
    pub history: Vec<HistoryRecord>,
}

impl Trainer {
    pub fn new(
        model: GaitModel<f32>,
        config: TrainConfig,
        augment: AugmentConfig,
        topology: SkeletonTopology,
    ) -> Result<Self> {
        config.validate()?;
        augment.validate()?;
        Ok(Trainer {
            adam: Adam::for_module(&model),
            model,
            config,
            augment,
            topology,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Forward, loss, backward and one optimizer update at `lr`.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        self.model.visit_mut(&mut |p| p.tensor.zero_grad());
        let features = self.model.forward(&batch.features)?;
        let (loss, grad) = supcon_loss(&features, &batch.labels, self.config.temperature)?;
        self.model.backward(&grad)?;
        self.adam.step(&mut self.model, lr, self.config.weight_decay)?;
        Ok(loss)
    }

    /// Cycle index and epoch within it for a global epoch.
    fn locate(&self, epoch: usize) -> Option<(usize, usize)> {
        let mut start = 0;
        for (i, c) in self.config.cycles.iter().enumerate() {
            let n = self.config.cycle_epochs(c);
            if epoch < start + n {
                return Some((i, epoch - start));
            }
            start += n;
        }
        None
    }

    /// Batch source for one epoch: a ChaCha stream keyed by the global epoch.
    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        rng
    }

    /// Runs one epoch; batches are prepared on a helper thread while the
    /// previous step executes.
    pub fn run_epoch(&mut self, set: &TrainSet) -> Result<f64> {
        let (cycle_idx, epoch_in_cycle) = self
            .locate(self.epoch)
            .ok_or_else(|| Error::Config("training already complete".into()))?;
        let cycle = self.config.cycles[cycle_idx];
        let spe = self.config.epoch_steps(set.num_sequences());
        let schedule = self.config.schedule(&cycle, spe);
        let mut rng = self.epoch_rng(self.epoch);
        let (p, k) = (self.config.subjects_per_batch, self.config.sequences_per_subject);
        let (augment, topology) = (self.augment.clone(), self.topology.clone());
        let mut losses = Vec::with_capacity(spe);
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel(2);
            scope.spawn(move || {
                for _ in 0..spe {
                    let batch = sample_batch(set, p, k, &augment, &topology, &mut rng);
                    let failed = batch.is_err();
                    if tx.send(batch).is_err() || failed {
                        break;
                    }
                }
            });
            for i in 0..spe {
                let batch = rx.recv().map_err(|_| Error::Config("batch producer stopped".into()))??;
                let lr = schedule.lr(epoch_in_cycle * spe + i)?;
                let loss = self.train_step(&batch, lr)?;
                self.history.push(HistoryRecord {
                    step: self.step,
                    epoch: self.epoch,
                    cycle: cycle_idx,
                    lr,
                    loss,
                });
                self.step += 1;
                losses.push(loss);
            }
            Ok(())
        })?;
        self.epoch += 1;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Trains through every remaining epoch of every cycle. With an output
    /// directory, checkpoints every `checkpoint_every` epochs and at each
    /// cycle end, then writes `weights.ggw` and `history.jsonl`.
    pub fn fit(&mut self, set: &TrainSet, out: Option<&Path>) -> Result<()> {
        if set.num_sequences() == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        let total = self.config.total_epochs();
        while self.epoch < total {
            let (cycle, in_cycle) = self.locate(self.epoch).expect("epoch in range");
            let loss = self.run_epoch(set)?;
            log::info!(
                "epoch {}/{total} (cycle {}) mean loss {loss:.5}",
                self.epoch,
                cycle + 1
            );
            let cycle_end = in_cycle + 1 == self.config.cycle_epochs(&self.config.cycles[cycle]);
            if let Some(dir) = out {
                if cycle_end || (in_cycle + 1) % self.config.checkpoint_every == 0 {
                    self.save_checkpoint(&dir.join("checkpoint"))?;
                    self.write_history(&dir.join("history.jsonl"))?;
                }
            }
        }
        if let Some(dir) = out {
            write_bytes(&dir.join("weights.ggw"), &save_weights(&self.model))?;
            self.write_history(&dir.join("history.jsonl"))?;
        }
        Ok(())
    }

    pub fn write_history(&self, path: &Path) -> Result<()> {
        let mut text = Vec::new();
        for r in &self.history {
            serde_json::to_writer(&mut text, r)?;
            text.push(b'\n');
        }
        write_bytes(path, &text)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_bytes(&dir.join("weights.ggw"), &save_weights(&self.model))?;
        write_bytes(&dir.join("optimizer.ggw"), &save_optimizer(&self.adam, self.model.spec()))?;
        let state = CheckpointState {
            epoch: self.epoch,
            step: self.step,
            history_len: self.history.len(),
            spec_hash: self.model.spec().hash(),
        };
        write_bytes(&dir.join("state.json"), &serde_json::to_vec_pretty(&state)?)
    }

    /// Restores weights, optimizer moments, counters and history from
    /// `out/checkpoint` and `out/history.jsonl`.
    pub fn resume(&mut self, out: &Path) -> Result<()> {
        let dir = out.join("checkpoint");
        let state: CheckpointState = serde_json::from_slice(&read_bytes(&dir.join("state.json"))?)?;
        if state.spec_hash != self.model.spec().hash() {
            return Err(Error::SpecMismatch {
                expected: self.model.spec().hash(),
                found: state.spec_hash,
            });
        }
        load_weights_into(&mut self.model, &read_bytes(&dir.join("weights.ggw"))?)?;
        self.adam = load_optimizer(&read_bytes(&dir.join("optimizer.ggw"))?)?;
        let history = String::from_utf8_lossy(&read_bytes(&out.join("history.jsonl"))?).into_owned();
        let mut records = history
            .lines()
            .filter(|l| !l.is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<HistoryRecord>, _>>()?;
        if records.len() < state.history_len {
            return Err(Error::Config("history shorter than checkpoint".into()));
        }
        records.truncate(state.history_len);
        self.history = records;
        self.epoch = state.epoch;
        self.step = state.step;
        Ok(())
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
