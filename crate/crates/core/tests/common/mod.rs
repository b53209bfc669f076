//! Shared oracles and generators for the integration tests.
#![allow(dead_code)]

use gaitgraph::dataset::{Condition, SequenceKey};
use gaitgraph::eval::{Embedding, EmbeddingGallery};
use gaitgraph::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

fn normalize(row: &mut [f64]) {
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    row.iter_mut().for_each(|x| *x /= n);
}

pub fn unit_rows(b: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut v = normal(b * d, seed);
    v.chunks_mut(d).for_each(normalize);
    Tensor::from_vec(&[b, d], v).unwrap()
}

/// Random orthogonal `d x d` matrix (Gram-Schmidt on Gaussian columns), row-major.
pub fn orthogonal(d: usize, seed: u64) -> Vec<f64> {
    let mut q = normal(d * d, seed);
    for i in 0..d {
        for j in 0..i {
            let dot: f64 = (0..d).map(|k| q[i * d + k] * q[j * d + k]).sum();
            for k in 0..d {
                q[i * d + k] -= dot * q[j * d + k];
            }
        }
        normalize(&mut q[i * d..(i + 1) * d]);
    }
    q
}

fn apply(q: &[f64], row: &[f64]) -> Vec<f64> {
    let d = row.len();
    (0..d).map(|i| (0..d).map(|k| q[i * d + k] * row[k]).sum()).collect()
}

pub fn rotate(f: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let d = f.shape()[1];
    let q = orthogonal(d, seed);
    let data = f.data().chunks(d).flat_map(|r| apply(&q, r)).collect();
    Tensor::from_vec(f.shape(), data).unwrap()
}

/// Mean over anchors with positives of `-1/|P| sum_p log(exp(z_i.z_p/t) / sum_{a != i} exp(z_i.z_a/t))`,
/// written as the plain double sum.
pub fn supcon_oracle(z: &[f64], d: usize, labels: &[u32], tau: f64) -> f64 {
    let b = labels.len();
    let dot = |i: usize, j: usize| (0..d).map(|k| z[i * d + k] * z[j * d + k]).sum::<f64>();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..b {
        let mut denom = 0.0;
        for a in 0..b {
            if a != i {
                denom += (dot(i, a) / tau).exp();
            }
        }
        let mut sum = 0.0;
        let mut count = 0;
        for p in 0..b {
            if p != i && labels[p] == labels[i] {
                sum += ((dot(i, p) / tau).exp() / denom).ln();
                count += 1;
            }
        }
        if count > 0 {
            total += -sum / count as f64;
            anchors += 1;
        }
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Brute force: the full distance matrix, then the first minimum per probe.
pub fn rank1_oracle(gallery: &EmbeddingGallery, probes: &EmbeddingGallery) -> Vec<Option<f64>> {
    let mut views: Vec<u32> = gallery.entries.iter().chain(&probes.entries).map(|e| e.key.view).collect();
    views.sort_unstable();
    views.dedup();
    let dist: Vec<Vec<f64>> = probes
        .entries
        .iter()
        .map(|p| gallery.entries.iter().map(|g| distance(&p.feature, &g.feature)).collect())
        .collect();
    let mut cells = Vec::new();
    for &pv in &views {
        let rows: Vec<usize> = (0..probes.len()).filter(|&i| probes.entries[i].key.view == pv).collect();
        if rows.is_empty() {
            cells.push(None);
            continue;
        }
        let mut per_gallery_view = Vec::new();
        for &gv in views.iter().filter(|&&v| v != pv) {
            let mut correct = 0usize;
            for &r in &rows {
                let mut best: Option<usize> = None;
                for (j, g) in gallery.entries.iter().enumerate() {
                    if g.key.view == gv && best.is_none_or(|b| dist[r][j] < dist[r][b]) {
                        best = Some(j);
                    }
                }
                if gallery.entries[best.unwrap()].key.subject == probes.entries[r].key.subject {
                    correct += 1;
                }
            }
            per_gallery_view.push(100.0 * correct as f64 / rows.len() as f64);
        }
        cells.push(if per_gallery_view.is_empty() {
            None
        } else {
            Some(per_gallery_view.iter().sum::<f64>() / per_gallery_view.len() as f64)
        });
    }
    cells
}

fn unit_f32(v: Vec<f64>) -> Vec<f32> {
    let mut v = v;
    normalize(&mut v);
    v.into_iter().map(|x| x as f32).collect()
}

/// Noisy subject centroids; every view has gallery entries, probe views may be a subset.
pub fn random_galleries(subjects: u32, views: u32, dim: usize, seed: u64) -> (EmbeddingGallery, EmbeddingGallery) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids: Vec<Vec<f64>> = (0..subjects).map(|s| normal(dim, seed ^ (s as u64 + 1) << 20)).collect();
    let spread = rng.random_range(0.2..1.5);
    let entry = |subject: u32, view: u32, seq: u32, rng: &mut ChaCha8Rng| {
        let f: Vec<f64> = centroids[subject as usize]
            .iter()
            .map(|c| c + spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Embedding {
            key: SequenceKey { subject: subject + 1, condition: Condition::Nm, seq, view: view * 18 },
            feature: unit_f32(f),
        }
    };
    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    for s in 0..subjects {
        for v in 0..views {
            for seq in 1..=rng.random_range(1..=2) {
                gallery.push(entry(s, v, seq, &mut rng));
            }
            if rng.random_bool(0.8) {
                probes.push(entry(s, v, 5, &mut rng));
            }
        }
    }
    if probes.is_empty() {
        probes.push(entry(0, 0, 5, &mut rng));
    }
    (EmbeddingGallery::new(gallery).unwrap(), EmbeddingGallery::new(probes).unwrap())
}

pub fn rotate_galleries(g: &EmbeddingGallery, p: &EmbeddingGallery, seed: u64) -> (EmbeddingGallery, EmbeddingGallery) {
    let d = g.entries[0].feature.len();
    let q = orthogonal(d, seed);
    let rot = |x: &EmbeddingGallery| {
        EmbeddingGallery::new(
            x.entries
                .iter()
                .map(|e| Embedding {
                    key: e.key,
                    feature: apply(&q, &e.feature.iter().map(|&v| v as f64).collect::<Vec<_>>())
                        .into_iter()
                        .map(|v| v as f32)
                        .collect(),
                })
                .collect(),
        )
        .unwrap()
    };
    (rot(g), rot(p))
}
