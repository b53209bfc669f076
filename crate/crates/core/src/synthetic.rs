//! Synthetic walking-skeleton corpora in the CASIA-B layout.
//!
//! Each subject is a parametric 3D walker (limb lengths, widths, cadence,
//! swing amplitudes, posture). A sequence samples the walker at a random
//! phase and maps it to the image for the camera view (see [`ViewModel`]),
//! followed by a per-sequence scale and image offset, pixel noise and random
//! detection confidences.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{index_corpus, write_sequence, Condition, DatasetIndex, PoseSequence, SequenceKey, NUM_JOINTS, VIEWS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkerParams {
    /// Frames per gait cycle.
    pub period: f64,
    pub thigh: f64,
    pub shin: f64,
    pub torso: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub head: f64,
    pub shoulder_width: f64,
    pub hip_width: f64,
    pub hip_swing: f64,
    pub knee_flex: f64,
    pub arm_swing: f64,
    pub elbow_bend: f64,
    pub lean: f64,
    pub bob: f64,
    pub sway: f64,
}

impl WalkerParams {
    /// A mid-range walker.
    pub fn average() -> Self {
        WalkerParams {
            period: 26.0,
            thigh: 0.45,
            shin: 0.43,
            torso: 0.52,
            upper_arm: 0.30,
            forearm: 0.27,
            head: 0.22,
            shoulder_width: 0.38,
            hip_width: 0.26,
            hip_swing: 0.42,
            knee_flex: 0.75,
            arm_swing: 0.45,
            elbow_bend: 0.25,
            lean: 0.05,
            bob: 0.025,
            sway: 0.025,
        }
    }

    /// Walker for `subject`. Each attribute takes a spread-out level from a
    /// seeded permutation so subjects differ on several traits at once.
    pub fn for_subject(seed: u64, subject: u32, subjects: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = subjects.max(1) as usize;
        let idx = (subject as usize).saturating_sub(1) % n;
        // level in [-1, 1] from a per-attribute permutation of the subjects
        let mut level = || {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.sort_by_key(|_| rng.random::<u32>());
            let jitter: f64 = rng.random_range(-0.15..0.15);
            let base = if n == 1 { 0.0 } else { perm[idx] as f64 / (n - 1) as f64 * 2.0 - 1.0 };
            (base + jitter / n as f64).clamp(-1.0, 1.0)
        };
        let a = Self::average();
        let mut p = a;
        p.period = a.period * (1.0 + 0.3 * level());
        let leg = 1.0 + 0.12 * level();
        let ratio = 0.1 * level();
        p.thigh = a.thigh * leg * (1.0 + ratio);
        p.shin = a.shin * leg * (1.0 - ratio);
        p.torso = a.torso * (1.0 + 0.12 * level());
        let arm = 1.0 + 0.12 * level();
        p.upper_arm = a.upper_arm * arm;
        p.forearm = a.forearm * arm;
        p.head = a.head * (1.0 + 0.1 * level());
        p.shoulder_width = a.shoulder_width * (1.0 + 0.2 * level());
        p.hip_width = a.hip_width * (1.0 + 0.2 * level());
        p.hip_swing = a.hip_swing * (1.0 + 0.3 * level());
        p.knee_flex = a.knee_flex * (1.0 + 0.3 * level());
        p.arm_swing = a.arm_swing * (1.0 + 0.5 * level());
        p.elbow_bend = a.elbow_bend * (1.0 + 0.8 * level());
        p.lean = a.lean + 0.08 * level();
        p.bob = a.bob * (1.0 + 0.5 * level());
        p.sway = a.sway * (1.0 + 0.6 * level());
        p
    }

    /// How a walking condition alters the gait.
    pub fn under(&self, condition: Condition) -> Self {
        let mut p = *self;
        match condition {
            Condition::Nm => {}
            Condition::Bg => {
                p.arm_swing *= 0.8;
                p.lean += 0.02;
            }
            Condition::Cl => {
                p.shoulder_width *= 1.08;
                p.hip_width *= 1.06;
                p.arm_swing *= 0.85;
                p.knee_flex *= 0.95;
            }
        }
        p
    }

    /// Body-frame joint positions `[X, Y, Z]` (lateral, up, forward) at gait phase `phi`.
    /// `bag_arm` damps the right arm's swing (a carried bag).
    pub fn pose(&self, phi: f64, bag_arm: bool) -> [[f64; 3]; NUM_JOINTS] {
        let leg_len = self.thigh + self.shin;
        let pelvis_y = leg_len * 0.97 + self.bob * (2.0 * phi).cos();
        let pelvis_x = self.sway * phi.sin();
        let mut j = [[0.0; 3]; NUM_JOINTS];

        let leg = |side: f64, phase: f64| {
            let hip = [pelvis_x + side * self.hip_width / 2.0, pelvis_y, 0.0];
            let a = self.hip_swing * phase.sin();
            let k = self.knee_flex * 0.5 * (1.0 + (phase + 0.9).sin()).powi(2) / 2.0;
            let knee = [hip[0], hip[1] - self.thigh * a.cos(), hip[2] + self.thigh * a.sin()];
            let ankle = [knee[0], knee[1] - self.shin * (a - k).cos(), knee[2] + self.shin * (a - k).sin()];
            (hip, knee, ankle)
        };
        // left side is +X
        let (lh, lk, la) = leg(1.0, phi);
        let (rh, rk, ra) = leg(-1.0, phi + PI);
        j[11] = lh;
        j[13] = lk;
        j[15] = la;
        j[12] = rh;
        j[14] = rk;
        j[16] = ra;

        let top_y = pelvis_y + self.torso * self.lean.cos();
        let top_z = self.torso * self.lean.sin();
        let arm = |side: f64, phase: f64, damp: f64| {
            let shoulder = [pelvis_x + side * self.shoulder_width / 2.0, top_y, top_z];
            let b = -self.arm_swing * damp * phase.sin();
            let elbow = [
                shoulder[0],
                shoulder[1] - self.upper_arm * b.cos(),
                shoulder[2] + self.upper_arm * b.sin(),
            ];
            let c = b + self.elbow_bend * (1.0 + 0.5 * (-phase.sin()).max(0.0));
            let wrist = [
                elbow[0] + side * 0.02,
                elbow[1] - self.forearm * c.cos(),
                elbow[2] + self.forearm * c.sin(),
            ];
            (shoulder, elbow, wrist)
        };
        let (ls, le, lw) = arm(1.0, phi, 1.0);
        let (rs, re, rw) = arm(-1.0, phi + PI, if bag_arm { 0.25 } else { 1.0 });
        j[5] = ls;
        j[7] = le;
        j[9] = lw;
        j[6] = rs;
        j[8] = re;
        j[10] = rw;

        let nose = [pelvis_x, top_y + self.head * 0.75, top_z + self.head * 0.35];
        j[0] = nose;
        j[1] = [nose[0] + 0.035, nose[1] + 0.04, nose[2] - 0.03];
        j[2] = [nose[0] - 0.035, nose[1] + 0.04, nose[2] - 0.03];
        j[3] = [nose[0] + 0.075, nose[1] + 0.01, nose[2] - 0.11];
        j[4] = [nose[0] - 0.075, nose[1] + 0.01, nose[2] - 0.11];
        j
    }
}

/// How a view angle `theta` turns body coordinates into image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewModel {
    /// Fixed oblique projection `u = (X + Z) / sqrt(2)`, then an invertible
    /// per-view map `x = a u + h Y` with `a = ±(0.45 + 0.55 |cos theta|)`
    /// (negative past 90°) and shear `h = 0.25 sin(2 theta)`.
    Affine,
    /// Orthographic camera orbit `x = X cos(theta) + Z sin(theta)`; frontal
    /// views lose the sagittal motion.
    Rotation,
}

impl ViewModel {
    /// Image `(x, y)` in body units, `y` pointing up.
    pub fn project(self, theta: f64, p: [f64; 3]) -> (f64, f64) {
        match self {
            ViewModel::Affine => {
                let u = (p[0] + p[2]) * std::f64::consts::FRAC_1_SQRT_2;
                let c = theta.cos();
                let a = (0.45 + 0.55 * c.abs()) * if c < -1e-9 { -1.0 } else { 1.0 };
                (a * u + 0.25 * (2.0 * theta).sin() * p[1], p[1])
            }
            ViewModel::Rotation => (p[0] * theta.cos() + p[2] * theta.sin(), p[1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub subjects: u32,
    pub min_frames: usize,
    pub max_frames: usize,
    pub views: Vec<u32>,
    /// Per-joint pixel noise, as a fraction of body height.
    pub noise: f64,
    /// Every subject shares one walker and differs only in cadence, so
    /// identity lives purely in the temporal ordering of poses.
    pub temporal_only: bool,
    pub view_model: ViewModel,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            subjects: 10,
            min_frames: 70,
            max_frames: 100,
            views: VIEWS.to_vec(),
            noise: 0.004,
            temporal_only: false,
            view_model: ViewModel::Affine,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn walker(&self, subject: u32) -> WalkerParams {
        if self.temporal_only {
            let mut p = WalkerParams::average();
            let n = self.subjects.max(2) as f64;
            // cadences interleaved so train and test subjects span the same range
            let rank = (subject.saturating_sub(1) as f64 * 7.0) % n;
            p.period = 14.0 + 26.0 * rank / (n - 1.0);
            p
        } else {
            WalkerParams::for_subject(self.seed, subject, self.subjects)
        }
    }

    pub fn keys(&self) -> Vec<SequenceKey> {
        let mut keys = Vec::new();
        for subject in 1..=self.subjects {
            for condition in Condition::ALL {
                for seq in 1..=condition.sequences() {
                    for &view in &self.views {
                        keys.push(SequenceKey { subject, condition, seq, view });
                    }
                }
            }
        }
        keys
    }
}

fn key_seed(seed: u64, k: &SequenceKey) -> u64 {
    let c = k.condition as u64;
    seed ^ ((k.subject as u64) << 40 | c << 32 | (k.seq as u64) << 16 | k.view as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn generate_sequence(config: &SyntheticConfig, key: SequenceKey) -> PoseSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(key_seed(config.seed, &key));
    let base = config.walker(key.subject);
    let walker = if config.temporal_only { base } else { base.under(key.condition) };
    let bag = key.condition == Condition::Bg && !config.temporal_only;
    let frames = rng.random_range(config.min_frames..=config.max_frames.max(config.min_frames));
    let phase0 = rng.random_range(0.0..TAU);
    let theta = (key.view as f64 + rng.random_range(-2.0..2.0)).to_radians();
    let scale = rng.random_range(90.0..130.0);
    let (ox, oy) = (rng.random_range(120.0..200.0), rng.random_range(180.0..220.0));
    let noise = Normal::new(0.0, config.noise * scale).expect("non-negative noise");
    let mut data = Vec::with_capacity(frames * NUM_JOINTS * 3);
    for t in 0..frames {
        let phi = phase0 + TAU * t as f64 / walker.period;
        for p in walker.pose(phi, bag) {
            let (x, y) = config.view_model.project(theta, p);
            data.push(ox + scale * x + noise.sample(&mut rng));
            data.push(oy - scale * y + noise.sample(&mut rng));
            data.push(rng.random_range(0.6..1.0));
        }
    }
    PoseSequence::new(key, NUM_JOINTS, data).expect("consistent frame size")
}

pub fn generate_corpus(config: &SyntheticConfig) -> Vec<PoseSequence> {
    config.keys().into_par_iter().map(|k| generate_sequence(config, k)).collect()
}

/// Writes the corpus as pose CSV files into `dir` and returns its index.
pub fn write_corpus(config: &SyntheticConfig, dir: &Path) -> Result<DatasetIndex> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    config
        .keys()
        .into_par_iter()
        .map(|k| write_sequence(dir, &generate_sequence(config, k)).map(|_| ()))
        .collect::<Result<Vec<()>>>()?;
    index_corpus(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_layout() {
        let cfg = SyntheticConfig {
            subjects: 2,
            min_frames: 12,
            max_frames: 15,
            ..Default::default()
        };
        let corpus = generate_corpus(&cfg);
        assert_eq!(corpus.len(), 220);
        assert!(corpus.iter().all(|s| (12..=15).contains(&s.num_frames())));
        assert_eq!(generate_sequence(&cfg, corpus[5].key), corpus[5]);
    }

    #[test]
    fn affine_views_keep_the_oblique_coordinate_recoverable() {
        let p = [0.3, 1.2, -0.7];
        let u = (p[0] + p[2]) * std::f64::consts::FRAC_1_SQRT_2;
        for view in (0..=180).step_by(18) {
            let theta = (view as f64).to_radians();
            let (x, y) = ViewModel::Affine.project(theta, p);
            assert_eq!(y, p[1]);
            let a = (x - 0.25 * (2.0 * theta).sin() * y) / u;
            assert!(a.abs() >= 0.45 - 1e-12, "view {view}: scale {a}");
            assert_eq!(a < 0.0, view > 90, "view {view}");
        }
    }

    #[test]
    fn views_change_the_projection() {
        let cfg = SyntheticConfig::default();
        let key = |view| SequenceKey { subject: 1, condition: Condition::Nm, seq: 1, view };
        let side = generate_sequence(&cfg, key(90));
        let front = generate_sequence(&cfg, key(0));
        let spread = |s: &PoseSequence| {
            let xs: Vec<f64> = s.frame(0).chunks(3).map(|j| j[0]).collect();
            xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min)
        };
        assert!(spread(&side) != spread(&front));
    }

    #[test]
    fn temporal_only_walkers_share_shape() {
        let cfg = SyntheticConfig {
            temporal_only: true,
            ..Default::default()
        };
        let (a, b) = (cfg.walker(1), cfg.walker(2));
        assert_ne!(a.period, b.period);
        assert_eq!(WalkerParams { period: 0.0, ..a }, WalkerParams { period: 0.0, ..b });
        let periods: std::collections::BTreeSet<u64> = (1..=10).map(|s| cfg.walker(s).period as u64).collect();
        assert_eq!(periods.len(), 10);
    }
}
