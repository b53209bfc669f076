//! Windowing, coordinate normalization and the training-time augmentations
//! (temporal flip, mirroring, joint noise).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::PoseSequence;
use crate::error::{Error, Result};
use crate::skeleton::SkeletonTopology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_reverse: f64,
    pub p_mirror: f64,
    pub sigma_frame: f64,
    pub sigma_sequence: f64,
    pub window: usize,
    pub noise_on_confidence: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_reverse: 0.5,
            p_mirror: 0.5,
            sigma_frame: 0.005,
            sigma_sequence: 0.01,
            window: 60,
            noise_on_confidence: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_reverse) || !prob(self.p_mirror) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        if !(self.sigma_frame >= 0.0 && self.sigma_sequence >= 0.0) {
            return Err(Error::Config("noise sigmas must be non-negative".into()));
        }
        if self.window < 4 {
            return Err(Error::Config(format!("window {} is below 4", self.window)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    Random,
    Center,
}

pub fn reverse_time(seq: &PoseSequence) -> PoseSequence {
    let stride = seq.joints() * 3;
    let data: Vec<f64> = seq.data().chunks(stride).rev().flatten().copied().collect();
    seq.with_data(data)
}

/// Reflects x about each frame's mean x and swaps left/right joint slots.
pub fn mirror_pose(seq: &PoseSequence, topology: &SkeletonTopology) -> PoseSequence {
    let n = seq.joints();
    let map = topology.mirror_map();
    let mut data = vec![0.0; seq.data().len()];
    for (src, dst) in seq.data().chunks(n * 3).zip(data.chunks_mut(n * 3)) {
        let cx = exact_mean((0..n).map(|j| src[j * 3]));
        for j in 0..n {
            let from = &src[map[j] * 3..map[j] * 3 + 3];
            dst[j * 3] = 2.0 * cx - from[0];
            dst[j * 3 + 1] = from[1];
            dst[j * 3 + 2] = from[2];
        }
    }
    seq.with_data(data)
}

/// Correctly rounded mean (double-double accumulation), so a reflected frame
/// has bitwise the same center whenever the reflection itself is exact.
fn exact_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut hi, mut lo, mut n) = (0.0f64, 0.0f64, 0usize);
    for v in values {
        let s = hi + v;
        let bv = s - hi;
        lo += (hi - (s - bv)) + (v - bv);
        hi = s;
        n += 1;
    }
    let (sum, err) = (hi + lo, lo - ((hi + lo) - hi));
    let n = n as f64;
    let q = sum / n;
    let r = (-n).mul_add(q, sum) + err;
    q + r / n
}

/// Adds per-frame noise and a per-joint offset shared by all frames to x and y
/// (and confidence, clamped to [0, 1], when requested).
pub fn jitter_joints<R: Rng + ?Sized>(
    seq: &PoseSequence,
    sigma_frame: f64,
    sigma_sequence: f64,
    noise_on_confidence: bool,
    rng: &mut R,
) -> PoseSequence {
    let n = seq.joints();
    let channels = if noise_on_confidence { 3 } else { 2 };
    let normal = |s: f64| Normal::new(0.0, s).expect("sigma is non-negative");
    let (frame_noise, seq_noise) = (normal(sigma_frame), normal(sigma_sequence));
    let offsets: Vec<f64> = (0..n * channels).map(|_| seq_noise.sample(rng)).collect();
    let mut data = seq.data().to_vec();
    for frame in data.chunks_mut(n * 3) {
        for j in 0..n {
            for c in 0..channels {
                frame[j * 3 + c] += offsets[j * channels + c] + frame_noise.sample(rng);
            }
            if noise_on_confidence {
                frame[j * 3 + 2] = frame[j * 3 + 2].clamp(0.0, 1.0);
            }
        }
    }
    seq.with_data(data)
}

/// Exactly `window` consecutive frames; shorter sequences repeat cyclically.
pub fn sample_window<R: Rng + ?Sized>(
    seq: &PoseSequence,
    window: usize,
    mode: WindowMode,
    rng: &mut R,
) -> Result<PoseSequence> {
    let t = seq.num_frames();
    if t == 0 {
        return Err(Error::DegenerateSequence(format!("{} has no frames", seq.key)));
    }
    if window == 0 {
        return Err(Error::Config("window must be positive".into()));
    }
    let start = if t <= window {
        0
    } else {
        match mode {
            WindowMode::Center => (t - window) / 2,
            WindowMode::Random => rng.random_range(0..=t - window),
        }
    };
    let stride = seq.joints() * 3;
    let mut data = Vec::with_capacity(window * stride);
    for i in 0..window {
        let f = (start + i) % t;
        data.extend_from_slice(&seq.data()[f * stride..(f + 1) * stride]);
    }
    Ok(seq.with_data(data))
}

/// Centers on the sequence-wide mean (x, y) and divides by the largest
/// per-frame vertical extent.
pub fn normalize_coords(seq: &PoseSequence) -> Result<PoseSequence> {
    let data = seq.data();
    if !data.chunks(3).any(|j| j[2] > 0.0) {
        return Err(Error::DegenerateSequence(format!(
            "{} has no joint with positive confidence",
            seq.key
        )));
    }
    let count = (data.len() / 3) as f64;
    let mx = data.chunks(3).map(|j| j[0]).sum::<f64>() / count;
    let my = data.chunks(3).map(|j| j[1]).sum::<f64>() / count;
    let extent = data
        .chunks(seq.joints() * 3)
        .map(|frame| {
            let ys = frame.chunks(3).map(|j| j[1]);
            ys.clone().fold(f64::NEG_INFINITY, f64::max) - ys.fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    if !(extent > 0.0) {
        return Err(Error::DegenerateSequence(format!("{} has zero vertical extent", seq.key)));
    }
    let out = data
        .chunks(3)
        .flat_map(|j| [(j[0] - mx) / extent, (j[1] - my) / extent, j[2]])
        .collect();
    Ok(seq.with_data(out))
}

/// Random frame permutation, destroying temporal order.
pub fn shuffle_frames<R: Rng + ?Sized>(seq: &PoseSequence, rng: &mut R) -> PoseSequence {
    let stride = seq.joints() * 3;
    let mut order: Vec<usize> = (0..seq.num_frames()).collect();
    order.shuffle(rng);
    let data = order
        .iter()
        .flat_map(|&f| seq.data()[f * stride..(f + 1) * stride].iter().copied())
        .collect();
    seq.with_data(data)
}

/// Training view: random window, normalization, then random flip, mirror and noise.
pub fn train_view<R: Rng + ?Sized>(
    seq: &PoseSequence,
    config: &AugmentConfig,
    topology: &SkeletonTopology,
    rng: &mut R,
) -> Result<PoseSequence> {
    let mut s = normalize_coords(&sample_window(seq, config.window, WindowMode::Random, rng)?)?;
    if rng.random_bool(config.p_reverse) {
        s = reverse_time(&s);
    }
    if rng.random_bool(config.p_mirror) {
        s = mirror_pose(&s, topology);
    }
    Ok(jitter_joints(
        &s,
        config.sigma_frame,
        config.sigma_sequence,
        config.noise_on_confidence,
        rng,
    ))
}

/// Evaluation view: centered window, then normalization.
pub fn eval_view(seq: &PoseSequence, window: usize) -> Result<PoseSequence> {
    let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    normalize_coords(&sample_window(seq, window, WindowMode::Center, &mut unused)?)
}
