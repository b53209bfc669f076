//! Central finite-difference verification of analytic gradients (64-bit).

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::nn::Module;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub magnitude_floor: f64,
    /// Check at most this many entries per tensor (seeded sample); `None` checks all.
    pub max_entries: Option<usize>,
    pub check_input: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            magnitude_floor: 1e-4,
            max_entries: None,
            check_input: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Entries whose perturbation flipped a rectifier, where the central
    /// difference is not a derivative estimate.
    pub skipped: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn max_relative_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error() < tolerance
    }

    pub fn extend(&mut self, prefix: &str, other: GradReport) {
        for mut t in other.tensors {
            t.name = format!("{prefix}{}", t.name);
            self.tensors.push(t);
        }
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{:<40} checked {:>6}  skipped {:>4}  max rel err {:.3e}",
                t.name, t.checked, t.skipped, t.max_relative_error
            )?;
        }
        write!(f, "overall max relative error {:.3e}", self.max_relative_error())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn entries(len: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let mut idx = sample(rng, len, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Checks `analytic` against central differences of `f` around `x`.
///
/// `f` returns the scalar value and the rectifier pattern at its argument;
/// entries whose perturbations change the pattern are skipped.
pub fn check_function(
    name: &str,
    x: &[f64],
    analytic: &[f64],
    opts: &GradCheckOptions,
    mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<bool>)>,
) -> Result<TensorCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut point = x.to_vec();
    let (_, base) = f(&point)?;
    let mut check = TensorCheck {
        name: name.to_string(),
        checked: 0,
        skipped: 0,
        max_relative_error: 0.0,
    };
    for i in entries(x.len(), opts.max_entries, &mut rng) {
        let orig = point[i];
        point[i] = orig + opts.step;
        let (plus, pat_plus) = f(&point)?;
        point[i] = orig - opts.step;
        let (minus, pat_minus) = f(&point)?;
        point[i] = orig;
        if pat_plus != base || pat_minus != base {
            check.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.step);
        let err = relative_error(analytic[i], numeric, opts.magnitude_floor);
        check.max_relative_error = check.max_relative_error.max(err);
        check.checked += 1;
    }
    Ok(check)
}

fn projected_loss<M: Module<f64> + ?Sized>(
    module: &mut M,
    x: &Tensor<f64>,
    projection: &Tensor<f64>,
) -> Result<(f64, Vec<bool>)> {
    let y = module.forward(x)?;
    let mut pattern = Vec::new();
    module.relu_pattern(&mut pattern);
    Ok((y.dot(projection)?, pattern))
}

/// Gradient check of a module under the scalar loss `sum(output * R)` for a
/// fixed random `R`. Covers every trainable parameter and, optionally, the input.
pub fn check_module<M: Module<f64> + ?Sized>(
    module: &mut M,
    x: &Tensor<f64>,
    opts: &GradCheckOptions,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let y = module.forward(x)?;
    let projection = Tensor::from_vec(
        y.shape(),
        (0..y.len()).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )?;
    module.visit_mut(&mut |p| p.tensor.zero_grad());
    let dx = module.backward(&projection)?;

    let mut names = Vec::new();
    let mut analytic = Vec::new();
    module.visit(&mut |p| {
        if p.trainable() {
            names.push(p.name.clone());
            analytic.push(p.tensor.grad().map(|g| g.to_vec()).unwrap_or_default());
        }
    });

    let mut report = GradReport::default();
    for (slot, (name, grad)) in names.iter().zip(&analytic).enumerate() {
        let mut values = Vec::new();
        let mut k = 0;
        module.visit(&mut |p| {
            if p.trainable() {
                if k == slot {
                    values = p.values().to_vec();
                }
                k += 1;
            }
        });
        let set = |module: &mut M, point: &[f64]| {
            let mut k = 0;
            module.visit_mut(&mut |p| {
                if p.trainable() {
                    if k == slot {
                        p.tensor.data_mut().copy_from_slice(point);
                    }
                    k += 1;
                }
            });
        };
        let check = check_function(name, &values, grad, opts, |point| {
            set(module, point);
            projected_loss(module, x, &projection)
        });
        set(module, &values);
        report.tensors.push(check?);
    }

    if opts.check_input {
        let mut probe = x.clone();
        let check = check_function("input", x.data(), dx.data(), opts, |point| {
            probe.data_mut().copy_from_slice(point);
            projected_loss(module, &probe, &projection)
        })?;
        report.tensors.push(check);
    }
    Ok(report)
}

/// One entry of [`layer_suite`].
#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub layer: String,
    pub report: GradReport,
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect())
}

/// Checks every layer type, both block kinds and a quarter-width model on
/// 8-frame clips.
pub fn layer_suite(seed: u64) -> Result<Vec<LayerCheck>> {
    use crate::model::{BlockKind, BlockSpec, GaitModel, GraphConv, ModelSpec, ResGcnBlock};
    use crate::nn::{BatchNorm, GlobalAvgPool, L2Normalize, Linear, Relu, TemporalConv};
    use crate::skeleton::{AdjacencySet, SkeletonTopology};

    let opts = GradCheckOptions { seed, ..Default::default() };
    let sampled = GradCheckOptions { max_entries: Some(24), ..opts.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topology = SkeletonTopology::coco17();
    let adjacency = AdjacencySet::build(&topology, 3)?;
    let mut out = Vec::new();
    let mut push = |layer: &str, report: GradReport| out.push(LayerCheck { layer: layer.to_string(), report });

    let x = normal_tensor(&[2, 3, 7, 5], &mut rng)?;
    let mut conv = TemporalConv::<f64>::new("tcn", 3, 4, 3, 2, &mut rng)?;
    push("TemporalConv", check_module(&mut conv, &x, &opts)?);
    let mut bn = BatchNorm::<f64>::new("bn", 3);
    bn.gamma.tensor.data_mut().copy_from_slice(&[0.8, -1.2, 1.5]);
    bn.beta.tensor.data_mut().copy_from_slice(&[0.1, 0.0, -0.3]);
    push("BatchNorm", check_module(&mut bn, &x, &opts)?);
    push("ReLU", check_module(&mut Relu::new(), &x, &opts)?);
    push("GlobalAvgPool", check_module(&mut GlobalAvgPool::new(), &x, &opts)?);
    let mut fc = Linear::<f64>::new("fc", 5, 4, &mut rng);
    push("Linear", check_module(&mut fc, &normal_tensor(&[3, 5], &mut rng)?, &opts)?);
    push("L2Normalize", check_module(&mut L2Normalize::new(), &normal_tensor(&[3, 6], &mut rng)?, &opts)?);

    let mut gcn = GraphConv::<f64>::new("gcn", 3, 4, &adjacency, &mut rng);
    push("GraphConv", check_module(&mut gcn, &normal_tensor(&[2, 3, 3, 17], &mut rng)?, &sampled)?);
    for (label, spec) in [
        ("Basic block", BlockSpec::new(BlockKind::Basic, 3, 4, 1, 1).input()),
        ("Bottleneck block", BlockSpec::new(BlockKind::Bottleneck, 4, 4, 1, 1)),
        ("Bottleneck block, stride 2", BlockSpec::new(BlockKind::Bottleneck, 4, 8, 2, 2)),
    ] {
        let mut block = ResGcnBlock::<f64>::new("block", &spec, &adjacency, 3, 8, &mut rng)?;
        let x = normal_tensor(&[2, spec.in_channels, 5, 17], &mut rng)?;
        push(label, check_module(&mut block, &x, &sampled)?);
    }

    let spec = ModelSpec::resgcn_n39_r8().scaled(4);
    let mut model = GaitModel::<f64>::new(&spec, &topology, seed)?;
    let x = normal_tensor(&[2, 8, 17, 3], &mut rng)?;
    let few = GradCheckOptions { max_entries: Some(6), ..opts };
    push("Model (quarter width, T=8)", check_module(&mut model, &x, &few)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Relu;

    #[test]
    fn parameter_free_fragment_without_input_check_is_empty() {
        let mut relu = Relu::new();
        let x = Tensor::<f64>::full(&[2, 3], 0.5);
        let opts = GradCheckOptions {
            check_input: false,
            ..Default::default()
        };
        let report = check_module(&mut relu, &x, &opts).unwrap();
        assert!(report.is_empty());
        assert_eq!(report.max_relative_error(), 0.0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = [1.0, 2.0];
        let wrong = [2.0, 5.0]; // true gradient of x0^2 + x1^2 is (2, 4)
        let c = check_function("f", &x, &wrong, &GradCheckOptions::default(), |p| {
            Ok((p[0] * p[0] + p[1] * p[1], vec![]))
        })
        .unwrap();
        assert!(c.max_relative_error > 0.1);
    }

    #[test]
    fn relative_error_uses_floor_for_tiny_values() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1e-9, 2e-9, 1e-6) - 1e-3).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-12);
    }
}
