//! Supervised contrastive loss (mean over positives outside the log).

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Maximum allowed deviation of a feature norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-3;

/// Loss over unit-norm rows of `features` (`B x D`) and the gradient with
/// respect to them. Anchors without a same-label partner are skipped; the
/// loss is the mean over the remaining anchors (0 when none remain).
pub fn supcon_loss<T: Real>(features: &Tensor<T>, labels: &[u32], temperature: f64) -> Result<(f64, Tensor<T>)> {
    features.expect_rank(2, "contrastive features")?;
    let (b, d) = (features.shape()[0], features.shape()[1]);
    if labels.len() != b {
        return Err(Error::Shape(format!("{b} features but {} labels", labels.len())));
    }
    if b < 2 {
        return Err(Error::Contract(format!("contrastive loss needs at least 2 samples, got {b}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature {temperature} is not positive")));
    }
    let z: Vec<f64> = features.data().iter().map(|v| v.as_f64()).collect();
    for (i, row) in z.chunks(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Contract(format!("feature {i} has norm {norm:.6}, expected unit norm")));
        }
    }
    let dot = |i: usize, j: usize| -> f64 { z[i * d..(i + 1) * d].iter().zip(&z[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum() };

    let anchors: Vec<usize> = (0..b)
        .filter(|&i| (0..b).any(|j| j != i && labels[j] == labels[i]))
        .collect();
    let mut grad = vec![0.0; b * d];
    if anchors.is_empty() {
        return Ok((0.0, Tensor::from_vec(&[b, d], vec![T::zero(); b * d])?));
    }
    let scale = 1.0 / anchors.len() as f64;
    let mut total = 0.0;
    let mut coef = vec![0.0; b];
    for &i in &anchors {
        let logits: Vec<f64> = (0..b).map(|a| if a == i { f64::NEG_INFINITY } else { dot(i, a) / temperature }).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        let log_sum = sum.ln() + max;
        let positives: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let np = positives.len() as f64;
        total += positives.iter().map(|&p| log_sum - logits[p]).sum::<f64>() / np;

        // dL_i / dl_ia = softmax_ia - [a in P(i)] / |P(i)|
        for a in 0..b {
            coef[a] = if a == i { 0.0 } else { exp[a] / sum };
        }
        for &p in &positives {
            coef[p] -= 1.0 / np;
        }
        for (a, &c) in coef.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let c = c * scale / temperature;
            for k in 0..d {
                grad[i * d + k] += c * z[a * d + k];
                grad[a * d + k] += c * z[i * d + k];
            }
        }
    }
    let grad = Tensor::from_vec(&[b, d], grad.into_iter().map(T::from_f64).collect())?;
    Ok((total * scale, grad))
}
