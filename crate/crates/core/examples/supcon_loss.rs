//! Supervised contrastive loss on toy embeddings, clustered versus random
//! features across temperatures.
//!
//! cargo run --example supcon_loss

use gaitgraph::loss::supcon_loss;
use gaitgraph::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn unit_rows(rows: Vec<Vec<f64>>) -> Tensor<f64> {
    let d = rows[0].len();
    let data: Vec<f64> = rows
        .into_iter()
        .flat_map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.into_iter().map(move |x| x / n)
        })
        .collect();
    Tensor::from_vec(&[data.len() / d, d], data).unwrap()
}

fn main() -> gaitgraph::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (subjects, per_subject, dim) = (8u32, 4, 16);
    let labels: Vec<u32> = (0..subjects).flat_map(|s| std::iter::repeat_n(s, per_subject)).collect();
    let mut gaussian = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let centers: Vec<Vec<f64>> = (0..subjects).map(|_| gaussian(dim)).collect();
    let clustered = unit_rows(
        labels
            .iter()
            .map(|&s| centers[s as usize].iter().zip(gaussian(dim)).map(|(c, e)| c + 0.2 * e).collect())
            .collect(),
    );
    let random = unit_rows(labels.iter().map(|_| gaussian(dim)).collect());

    println!("temperature  clustered   random   large-τ limit ln(B-1)");
    for tau in [0.01, 0.05, 0.1, 0.5, 1.0] {
        let (c, _) = supcon_loss(&clustered, &labels, tau)?;
        let (r, _) = supcon_loss(&random, &labels, tau)?;
        println!("{tau:>11} {c:>10.4} {r:>8.4} {:>10.4}", ((labels.len() - 1) as f64).ln());
    }

    for tau in [0.01, 0.1] {
        let (_, grad) = supcon_loss(&clustered, &labels, tau)?;
        let norm = grad.data().iter().map(|g| g * g).sum::<f64>().sqrt();
        println!("gradient norm at {tau}: {norm:.4}");
    }
    Ok(())
}
