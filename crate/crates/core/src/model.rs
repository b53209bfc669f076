//! Graph convolution over partitioned skeleton adjacencies, residual
//! Basic/Bottleneck blocks, and the embedding network built from them.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{
    kaiming, missing_cache, reduce_in_order, BatchNorm, GlobalAvgPool, L2Normalize, Linear,
    Module, Relu, TemporalConv,
};
use crate::skeleton::{AdjacencySet, SkeletonTopology};
use crate::tensor::{gemm, MatRef, ParamKind, Parameter, Real, Tensor};

/// `sum_k A_k X_t Theta_k` at every frame: `B x C_in x T x N -> B x C_out x T x N`.
#[derive(Debug, Clone)]
pub struct GraphConv<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// One `N x N` operator per partition, row-major.
    adjacency: Vec<Vec<T>>,
    joints: usize,
    /// `K x C_in x C_out`
    pub theta: Parameter<T>,
    pub bias: Parameter<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> GraphConv<T> {
    pub fn new<R: rand::Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        adjacency: &AdjacencySet,
        rng: &mut R,
    ) -> Self {
        let k = adjacency.num_partitions();
        GraphConv {
            in_channels,
            out_channels,
            adjacency: Self::operators(adjacency),
            joints: adjacency.num_joints(),
            theta: Parameter::new(
                format!("{name}.theta"),
                kaiming(&[k, in_channels, out_channels], in_channels * k, rng),
                ParamKind::Weight,
            ),
            bias: Parameter::new(
                format!("{name}.bias"),
                Tensor::zeros(&[out_channels]),
                ParamKind::Exempt,
            ),
            cache: None,
        }
    }

    fn operators(adjacency: &AdjacencySet) -> Vec<Vec<T>> {
        adjacency
            .partitions
            .iter()
            .map(|m| m.data().iter().map(|&v| T::from_f64(v)).collect())
            .collect()
    }

    pub fn num_partitions(&self) -> usize {
        self.adjacency.len()
    }

    /// Swaps in a different operator set with the same partition count.
    pub fn set_adjacency(&mut self, adjacency: &AdjacencySet) -> Result<()> {
        if adjacency.num_partitions() != self.num_partitions() {
            return Err(Error::Shape(format!(
                "graph conv has {} partitions, adjacency has {}",
                self.num_partitions(),
                adjacency.num_partitions()
            )));
        }
        self.adjacency = Self::operators(adjacency);
        self.joints = adjacency.num_joints();
        Ok(())
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        x.expect_rank(4, "graph conv")?;
        let s = x.shape();
        if s[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "graph conv expects {} channels, input shape {:?}",
                self.in_channels, s
            )));
        }
        if s[3] != self.joints {
            return Err(Error::Shape(format!(
                "graph conv adjacency has {} joints, input has {}",
                self.joints, s[3]
            )));
        }
        Ok((s[0], s[2]))
    }

    fn theta_k(&self, k: usize) -> MatRef<'_, T> {
        let size = self.in_channels * self.out_channels;
        MatRef::new(
            &self.theta.values()[k * size..(k + 1) * size],
            self.in_channels,
            self.out_channels,
        )
    }

    fn run(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, frames) = self.check(x)?;
        let n = self.joints;
        let tn = frames * n;
        let in_size = self.in_channels * tn;
        let out_size = self.out_channels * tn;
        let mut out = Tensor::zeros(&[batch, self.out_channels, frames, n]);
        let bias = self.bias.values();
        out.data_mut()
            .par_chunks_mut(out_size.max(1))
            .enumerate()
            .for_each(|(b, out_b)| {
                let x_b = MatRef::new(&x.data()[b * in_size..(b + 1) * in_size], self.in_channels, tn);
                for (co, row) in out_b.chunks_mut(tn.max(1)).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias[co]);
                }
                let mut z = vec![T::zero(); out_size];
                for (k, adj) in self.adjacency.iter().enumerate() {
                    // Z_k = Theta_k^T X, then aggregate joints: out += Z_k A_k^T
                    gemm(T::one(), self.theta_k(k).t(), x_b, T::zero(), &mut z);
                    gemm(
                        T::one(),
                        MatRef::new(&z, self.out_channels * frames, n),
                        MatRef::new(adj, n, n).t(),
                        T::one(),
                        out_b,
                    );
                }
            });
        Ok(out)
    }
}

impl<T: Real> Module<T> for GraphConv<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.run(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(|| missing_cache("graph conv"))?;
        let (batch, frames) = self.check(&x)?;
        let n = self.joints;
        grad.expect_shape(&[batch, self.out_channels, frames, n])?;
        let tn = frames * n;
        let in_size = self.in_channels * tn;
        let out_size = self.out_channels * tn;
        let theta_size = self.in_channels * self.out_channels;
        let k_parts = self.num_partitions();

        let mut dx = Tensor::zeros(x.shape());
        let partial: Vec<(Vec<T>, Vec<T>)> = dx
            .data_mut()
            .par_chunks_mut(in_size.max(1))
            .enumerate()
            .map(|(b, dx_b)| {
                let x_b = MatRef::new(&x.data()[b * in_size..(b + 1) * in_size], self.in_channels, tn);
                let g_b = &grad.data()[b * out_size..(b + 1) * out_size];
                let db: Vec<T> = g_b.chunks(tn.max(1)).map(|r| r.iter().copied().sum()).collect();
                let mut dtheta = vec![T::zero(); k_parts * theta_size];
                let mut dz = vec![T::zero(); out_size];
                for (k, adj) in self.adjacency.iter().enumerate() {
                    gemm(
                        T::one(),
                        MatRef::new(g_b, self.out_channels * frames, n),
                        MatRef::new(adj, n, n),
                        T::zero(),
                        &mut dz,
                    );
                    let dz_m = MatRef::new(&dz, self.out_channels, tn);
                    gemm(
                        T::one(),
                        x_b,
                        dz_m.t(),
                        T::zero(),
                        &mut dtheta[k * theta_size..(k + 1) * theta_size],
                    );
                    gemm(T::one(), self.theta_k(k), dz_m, T::one(), dx_b);
                }
                (dtheta, db)
            })
            .collect();
        let (dts, dbs): (Vec<_>, Vec<_>) = partial.into_iter().unzip();
        reduce_in_order(&dts, self.theta.grad_mut());
        reduce_in_order(&dbs, self.bias.grad_mut());
        Ok(dx)
    }

    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.theta);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.theta);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Basic => "Basic",
            BlockKind::Bottleneck => "Bottleneck",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub temporal_stride: usize,
    /// Input blocks carry no residual connection.
    pub is_input_block: bool,
    /// Table group the block is listed under ("Block 1", "Block 2", ...).
    pub group: usize,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize, stride: usize, group: usize) -> Self {
        BlockSpec {
            kind,
            in_channels,
            out_channels,
            temporal_stride: stride,
            is_input_block: false,
            group,
        }
    }

    pub fn input(mut self) -> Self {
        self.is_input_block = true;
        self
    }

    pub fn inner_channels(&self, reduction: usize) -> usize {
        (self.out_channels / reduction.max(1)).max(4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_joints: usize,
    pub input_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub embedding_dim: usize,
    pub num_partitions: usize,
    pub temporal_kernel: usize,
    /// Bottleneck channel reduction rate.
    pub reduction: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::resgcn_n39_r8()
    }
}

impl ModelSpec {
    /// The published 17-joint layer plan: a Basic block and six Bottlenecks
    /// ending at 256 channels, pooled and mapped to a 128-d embedding.
    pub fn resgcn_n39_r8() -> Self {
        use BlockKind::*;
        ModelSpec {
            num_joints: 17,
            input_channels: 3,
            blocks: vec![
                BlockSpec::new(Basic, 3, 64, 1, 1).input(),
                BlockSpec::new(Bottleneck, 64, 64, 1, 1),
                BlockSpec::new(Bottleneck, 64, 32, 1, 1),
                BlockSpec::new(Bottleneck, 32, 128, 2, 2),
                BlockSpec::new(Bottleneck, 128, 128, 1, 2),
                BlockSpec::new(Bottleneck, 128, 256, 2, 2),
                BlockSpec::new(Bottleneck, 256, 256, 1, 2),
            ],
            embedding_dim: 128,
            num_partitions: 3,
            temporal_kernel: 9,
            reduction: 8,
        }
    }

    /// Same plan with every hidden width divided by `divisor`.
    pub fn scaled(&self, divisor: usize) -> Self {
        let d = divisor.max(1);
        let mut spec = self.clone();
        for (i, b) in spec.blocks.iter_mut().enumerate() {
            if i > 0 {
                b.in_channels = (b.in_channels / d).max(1);
            }
            b.out_channels = (b.out_channels / d).max(1);
        }
        spec
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map_or(self.input_channels, |b| b.out_channels)
    }

    /// Smallest clip length that survives every temporal reduction.
    pub fn min_frames(&self) -> usize {
        self.blocks.iter().map(|b| b.temporal_stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("invalid model spec: {m}")));
        if self.blocks.is_empty() {
            return bad("no blocks".into());
        }
        if self.temporal_kernel % 2 == 0 {
            return bad(format!("temporal kernel {} is even", self.temporal_kernel));
        }
        if !matches!(self.num_partitions, 1 | 3) {
            return bad(format!("num_partitions {} not in {{1, 3}}", self.num_partitions));
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim is zero".into());
        }
        let mut channels = self.input_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if !matches!(b.temporal_stride, 1 | 2) {
                return bad(format!("block {i} stride {} not in {{1, 2}}", b.temporal_stride));
            }
            if b.in_channels == 0 || b.out_channels == 0 {
                return bad(format!("block {i} has zero channels"));
            }
            if b.in_channels != channels {
                return bad(format!(
                    "block {i} expects {} channels but receives {channels}",
                    b.in_channels
                ));
            }
            channels = b.out_channels;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("model spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// One row of a shape trace: block group label, module name, output shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub block: String,
    pub module: String,
    pub shape: Vec<usize>,
}

impl fmt::Display for TraceRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        write!(f, "{:<8} {:<11} {}", self.block, self.module, dims.join(" × "))
    }
}

/// Output shapes of every stage for a `T x N x C` input, without running the network.
pub fn shape_trace(spec: &ModelSpec, input_shape: [usize; 3]) -> Result<Vec<TraceRow>> {
    spec.validate()?;
    let [mut frames, joints, channels] = input_shape;
    if joints != spec.num_joints {
        return Err(Error::Shape(format!(
            "expected {} joints, got {joints}",
            spec.num_joints
        )));
    }
    if channels != spec.input_channels {
        return Err(Error::Shape(format!(
            "expected {} input channels, got {channels}",
            spec.input_channels
        )));
    }
    if frames == 0 {
        return Err(Error::Shape("empty clip".into()));
    }
    let mut rows = vec![TraceRow {
        block: "Block 0".into(),
        module: "BatchNorm".into(),
        shape: vec![frames, joints, channels],
    }];
    let mut last_group = 0;
    for b in &spec.blocks {
        frames = frames.div_ceil(b.temporal_stride);
        last_group = last_group.max(b.group);
        rows.push(TraceRow {
            block: format!("Block {}", b.group),
            module: b.kind.to_string(),
            shape: vec![frames, joints, b.out_channels],
        });
    }
    let head = format!("Block {}", last_group + 1);
    rows.push(TraceRow {
        block: head.clone(),
        module: "AvgPool2D".into(),
        shape: vec![1, spec.feature_channels()],
    });
    rows.push(TraceRow {
        block: head,
        module: "FCN".into(),
        shape: vec![1, spec.embedding_dim],
    });
    Ok(rows)
}

#[derive(Debug, Clone)]
enum Layer<T> {
    Conv(TemporalConv<T>),
    Graph(GraphConv<T>),
    Norm(BatchNorm<T>),
    Relu(Relu),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $e:expr) => {
        match $self {
            Layer::Conv($l) => $e,
            Layer::Graph($l) => $e,
            Layer::Norm($l) => $e,
            Layer::Relu($l) => $e,
        }
    };
}

impl<T: Real> Module<T> for Layer<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        dispatch!(self, l => l.forward(x))
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        dispatch!(self, l => l.infer(x))
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        dispatch!(self, l => l.backward(grad))
    }

    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        dispatch!(self, l => l.visit(f))
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        dispatch!(self, l => l.visit_mut(f))
    }

    fn relu_pattern(&self, out: &mut Vec<bool>) {
        dispatch!(self, l => Module::<T>::relu_pattern(l, out))
    }
}

#[derive(Debug, Clone)]
enum Residual<T> {
    None,
    Identity,
    Projection(TemporalConv<T>),
}

/// One residual graph/temporal block.
///
/// Basic: `BN -> graph conv -> BN -> ReLU -> temporal conv -> BN -> ReLU`.
/// Bottleneck wraps the graph/temporal pair between 1x1 reduce and expand
/// convolutions. The residual branch is added to the main branch output.
#[derive(Debug, Clone)]
pub struct ResGcnBlock<T> {
    pub spec: BlockSpec,
    layers: Vec<Layer<T>>,
    residual: Residual<T>,
}

impl<T: Real> ResGcnBlock<T> {
    pub fn new<R: rand::Rng + ?Sized>(
        name: &str,
        spec: &BlockSpec,
        adjacency: &AdjacencySet,
        temporal_kernel: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (cin, cout, stride) = (spec.in_channels, spec.out_channels, spec.temporal_stride);
        let mut layers = vec![Layer::Norm(BatchNorm::new(&format!("{name}.bn_in"), cin))];
        let width = match spec.kind {
            BlockKind::Basic => cout,
            BlockKind::Bottleneck => spec.inner_channels(reduction),
        };
        let mut channels = cin;
        if spec.kind == BlockKind::Bottleneck {
            layers.push(Layer::Conv(TemporalConv::new(&format!("{name}.reduce"), cin, width, 1, 1, rng)?));
            layers.push(Layer::Norm(BatchNorm::new(&format!("{name}.bn_reduce"), width)));
            layers.push(Layer::Relu(Relu::new()));
            channels = width;
        }
        layers.push(Layer::Graph(GraphConv::new(&format!("{name}.gcn"), channels, width, adjacency, rng)));
        layers.push(Layer::Norm(BatchNorm::new(&format!("{name}.bn_gcn"), width)));
        layers.push(Layer::Relu(Relu::new()));
        layers.push(Layer::Conv(TemporalConv::new(
            &format!("{name}.tcn"),
            width,
            width,
            temporal_kernel,
            stride,
            rng,
        )?));
        layers.push(Layer::Norm(BatchNorm::new(&format!("{name}.bn_tcn"), width)));
        layers.push(Layer::Relu(Relu::new()));
        if spec.kind == BlockKind::Bottleneck {
            layers.push(Layer::Conv(TemporalConv::new(&format!("{name}.expand"), width, cout, 1, 1, rng)?));
            layers.push(Layer::Norm(BatchNorm::new(&format!("{name}.bn_expand"), cout)));
            layers.push(Layer::Relu(Relu::new()));
        }
        let residual = if spec.is_input_block {
            Residual::None
        } else if cin == cout && stride == 1 {
            Residual::Identity
        } else {
            Residual::Projection(TemporalConv::new(&format!("{name}.residual"), cin, cout, 1, stride, rng)?)
        };
        Ok(ResGcnBlock {
            spec: spec.clone(),
            layers,
            residual,
        })
    }

    pub fn set_adjacency(&mut self, adjacency: &AdjacencySet) -> Result<()> {
        for l in &mut self.layers {
            if let Layer::Graph(g) = l {
                g.set_adjacency(adjacency)?;
            }
        }
        Ok(())
    }
}

impl<T: Real> Module<T> for ResGcnBlock<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h)?;
        }
        match &mut self.residual {
            Residual::None => {}
            Residual::Identity => h.add_assign(x)?,
            Residual::Projection(conv) => h.add_assign(&conv.forward(x)?)?,
        }
        Ok(h)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer(&h)?;
        }
        match &self.residual {
            Residual::None => {}
            Residual::Identity => h.add_assign(x)?,
            Residual::Projection(conv) => h.add_assign(&conv.infer(x)?)?,
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        match &mut self.residual {
            Residual::None => {}
            Residual::Identity => g.add_assign(grad)?,
            Residual::Projection(conv) => g.add_assign(&conv.backward(grad)?)?,
        }
        Ok(g)
    }

    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        for l in &self.layers {
            l.visit(f);
        }
        if let Residual::Projection(conv) = &self.residual {
            conv.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
        if let Residual::Projection(conv) = &mut self.residual {
            conv.visit_mut(f);
        }
    }

    fn relu_pattern(&self, out: &mut Vec<bool>) {
        for l in &self.layers {
            l.relu_pattern(out);
        }
    }
}

/// The full embedding network: `B x T x N x C` pose clips to unit-norm
/// `B x embedding_dim` features.
#[derive(Debug, Clone)]
pub struct GaitModel<T> {
    spec: ModelSpec,
    adjacency: Arc<AdjacencySet>,
    input_bn: BatchNorm<T>,
    blocks: Vec<ResGcnBlock<T>>,
    pool: GlobalAvgPool,
    fc: Linear<T>,
    head: L2Normalize<T>,
    input_shape: Option<Vec<usize>>,
}

impl<T: Real> GaitModel<T> {
    pub fn new(spec: &ModelSpec, topology: &SkeletonTopology, seed: u64) -> Result<Self> {
        spec.validate()?;
        if topology.num_joints() != spec.num_joints {
            return Err(Error::Shape(format!(
                "model expects {} joints, topology has {}",
                spec.num_joints,
                topology.num_joints()
            )));
        }
        let adjacency = Arc::new(AdjacencySet::build(topology, spec.num_partitions)?);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = spec
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                ResGcnBlock::new(
                    &format!("blocks.{i}"),
                    b,
                    &adjacency,
                    spec.temporal_kernel,
                    spec.reduction,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GaitModel {
            spec: spec.clone(),
            input_bn: BatchNorm::new("input_bn", spec.input_channels),
            blocks,
            pool: GlobalAvgPool::new(),
            fc: Linear::new("fc", spec.feature_channels(), spec.embedding_dim, &mut rng),
            head: L2Normalize::new(),
            adjacency,
            input_shape: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn adjacency(&self) -> &AdjacencySet {
        &self.adjacency
    }

    /// Replaces the skeleton (e.g. a relabeled one) while keeping all weights.
    pub fn set_topology(&mut self, topology: &SkeletonTopology) -> Result<()> {
        let adjacency = AdjacencySet::build(topology, self.spec.num_partitions)?;
        for b in &mut self.blocks {
            b.set_adjacency(&adjacency)?;
        }
        self.adjacency = Arc::new(adjacency);
        Ok(())
    }

    pub fn blocks(&self) -> &[ResGcnBlock<T>] {
        &self.blocks
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable() {
                n += p.tensor.len()
            }
        });
        n
    }

    /// Copies values (not gradients) from a model of another precision.
    pub fn load_from<U: Real>(&mut self, other: &GaitModel<U>) -> Result<()> {
        let mut values = Vec::new();
        other.visit(&mut |p| values.push((p.name.clone(), p.values().to_vec())));
        let mut it = values.into_iter();
        let mut err = None;
        self.visit_mut(&mut |p| match it.next() {
            Some((name, v)) if name == p.name && v.len() == p.tensor.len() => {
                for (d, s) in p.tensor.data_mut().iter_mut().zip(v) {
                    *d = T::from_f64(s.as_f64());
                }
            }
            _ => err = Some(p.name.clone()),
        });
        match err {
            Some(name) => Err(Error::Shape(format!("parameter {name} does not match"))),
            None => Ok(()),
        }
    }

    fn to_channels_first(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_rank(4, "model input")?;
        let &[batch, frames, joints, channels] = x.shape() else { unreachable!() };
        if joints != self.spec.num_joints {
            return Err(Error::Shape(format!(
                "expected {} joints, got {joints}",
                self.spec.num_joints
            )));
        }
        if channels != self.spec.input_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {channels}",
                self.spec.input_channels
            )));
        }
        if frames < self.spec.min_frames() {
            return Err(Error::Shape(format!(
                "clip of {frames} frames is shorter than the {} the temporal strides need",
                self.spec.min_frames()
            )));
        }
        let mut out = Tensor::zeros(&[batch, channels, frames, joints]);
        let src = x.data();
        let dst = out.data_mut();
        for b in 0..batch {
            for t in 0..frames {
                for n in 0..joints {
                    for c in 0..channels {
                        dst[((b * channels + c) * frames + t) * joints + n] =
                            src[((b * frames + t) * joints + n) * channels + c];
                    }
                }
            }
        }
        Ok(out)
    }

    fn to_channels_last(shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
        let &[batch, frames, joints, channels] = shape else { unreachable!() };
        let mut out = Tensor::zeros(shape);
        let src = g.data();
        let dst = out.data_mut();
        for b in 0..batch {
            for t in 0..frames {
                for n in 0..joints {
                    for c in 0..channels {
                        dst[((b * frames + t) * joints + n) * channels + c] =
                            src[((b * channels + c) * frames + t) * joints + n];
                    }
                }
            }
        }
        out
    }

    /// Shapes (`T x N x C`, then pooled widths) after every stage of an eval pass.
    pub fn infer_trace(&self, x: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
        let mut h = self.input_bn.infer(&self.to_channels_first(x)?)?;
        let t_n_c = |s: &[usize]| vec![s[2], s[3], s[1]];
        let mut shapes = vec![t_n_c(h.shape())];
        for b in &self.blocks {
            h = b.infer(&h)?;
            shapes.push(t_n_c(h.shape()));
        }
        let pooled = Module::<T>::infer(&self.pool, &h)?;
        shapes.push(vec![1, pooled.shape()[1]]);
        let emb = self.fc.infer(&pooled)?;
        shapes.push(vec![1, emb.shape()[1]]);
        Ok(shapes)
    }

    /// Node features after the first `depth` blocks (eval mode), channels-first.
    pub fn infer_features(&self, x: &Tensor<T>, depth: usize) -> Result<Tensor<T>> {
        let mut h = self.input_bn.infer(&self.to_channels_first(x)?)?;
        for b in self.blocks.iter().take(depth) {
            h = b.infer(&h)?;
        }
        Ok(h)
    }
}

impl<T: Real> Module<T> for GaitModel<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.input_bn.forward(&self.to_channels_first(x)?)?;
        for b in &mut self.blocks {
            h = b.forward(&h)?;
        }
        let pooled = self.pool.forward(&h)?;
        let emb = self.fc.forward(&pooled)?;
        self.input_shape = Some(x.shape().to_vec());
        self.head.forward(&emb)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.input_bn.infer(&self.to_channels_first(x)?)?;
        for b in &self.blocks {
            h = b.infer(&h)?;
        }
        let pooled = Module::<T>::infer(&self.pool, &h)?;
        self.head.infer(&self.fc.infer(&pooled)?)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.take().ok_or_else(|| missing_cache("model"))?;
        let g = self.head.backward(grad)?;
        let g = self.fc.backward(&g)?;
        let mut g = Module::<T>::backward(&mut self.pool, &g)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        let g = self.input_bn.backward(&g)?;
        Ok(Self::to_channels_last(&shape, &g))
    }

    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.input_bn.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
        self.fc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.input_bn.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.fc.visit_mut(f);
    }

    fn relu_pattern(&self, out: &mut Vec<bool>) {
        for b in &self.blocks {
            b.relu_pattern(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_module, GradCheckOptions};
    use crate::skeleton::{normalize_adjacency, SquareMatrix};
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        kaiming(shape, 2, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn one_node() -> AdjacencySet {
        let t = SkeletonTopology::new(vec!["x".into()], vec![], vec![], vec![0]).unwrap();
        AdjacencySet::uniform(&t).unwrap()
    }

    fn two_nodes() -> AdjacencySet {
        let t = SkeletonTopology::new(vec!["a".into(), "b".into()], vec![(0, 1)], vec![], vec![0]).unwrap();
        AdjacencySet::uniform(&t).unwrap()
    }

    fn identity_theta(g: &mut GraphConv<f64>) {
        let c = g.in_channels;
        let d = g.theta.tensor.data_mut();
        d.fill(0.0);
        for i in 0..c {
            d[i * c + i] = 1.0;
        }
    }

    #[test]
    fn graph_conv_isolated_node_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = GraphConv::<f64>::new("g", 3, 3, &one_node(), &mut rng);
        identity_theta(&mut g);
        let x = random(&[2, 3, 4, 1], 1);
        assert_eq!(g.infer(&x).unwrap(), x);
    }

    #[test]
    fn graph_conv_averages_two_connected_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = GraphConv::<f64>::new("g", 1, 1, &two_nodes(), &mut rng);
        identity_theta(&mut g);
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        assert!(g.infer(&x).unwrap().data().iter().all(|v| (v - 2.0).abs() < 1e-14));
    }

    #[test]
    fn graph_conv_is_linear_and_checks_joints() {
        let adj = AdjacencySet::build(&SkeletonTopology::coco17(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = GraphConv::<f64>::new("g", 3, 5, &adj, &mut rng);
        let mut g0 = g.clone();
        g0.bias.tensor.data_mut().fill(0.0);
        let (x1, x2) = (random(&[2, 3, 4, 17], 3), random(&[2, 3, 4, 17], 4));
        let lhs = g0.infer(&x1.scale(1.5).add(&x2.scale(-2.0)).unwrap()).unwrap();
        let rhs = g0
            .infer(&x1)
            .unwrap()
            .scale(1.5)
            .add(&g0.infer(&x2).unwrap().scale(-2.0))
            .unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(g.infer(&random(&[1, 3, 4, 16], 5)), Err(Error::Shape(_))));
    }

    /// Loop evaluation of `D^-1/2 (A+I) D^-1/2 X Theta` at every frame.
    fn single_matrix_oracle(a: &SquareMatrix, x: &Tensor<f64>, theta: &[f64], cin: usize, cout: usize) -> Vec<f64> {
        let n = a.size();
        let ahat = normalize_adjacency(a).unwrap();
        let &[batch, _, frames, _] = x.shape() else { unreachable!() };
        let mut out = vec![0.0; batch * cout * frames * n];
        for b in 0..batch {
            for t in 0..frames {
                for i in 0..n {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for j in 0..n {
                            for ci in 0..cin {
                                acc += ahat[(i, j)]
                                    * x.data()[((b * cin + ci) * frames + t) * n + j]
                                    * theta[ci * cout + co];
                            }
                        }
                        out[((b * cout + co) * frames + t) * n + i] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_partition_matches_single_matrix_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..30 {
            let n = 1 + trial % 6;
            let names = (0..n).map(|i| format!("j{i}")).collect();
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random_bool(0.5) {
                        edges.push((i, j));
                    }
                }
            }
            let topo = SkeletonTopology::new(names, edges, vec![], vec![0]).unwrap();
            let adj = AdjacencySet::uniform(&topo).unwrap();
            let mut g = GraphConv::<f64>::new("g", 2, 3, &adj, &mut rng);
            g.bias.tensor.data_mut().fill(0.0);
            let x = random(&[2, 2, 3, n], trial as u64);
            let got = g.infer(&x).unwrap();
            let want = single_matrix_oracle(&topo.adjacency(), &x, g.theta.values(), 2, 3);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn graph_conv_gradients() {
        let adj = AdjacencySet::build(&SkeletonTopology::coco17(), 3).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = GraphConv::<f64>::new("g", 2, 3, &adj, &mut rng);
            let x = random(&[1 + seed as usize % 2, 2, 2 + seed as usize % 3, 17], seed);
            let rep = check_module(&mut g, &x, &GradCheckOptions::default()).unwrap();
            assert!(rep.passes(1e-4), "{rep}");
        }
    }

    #[test]
    fn table_spec_round_trips_and_hashes() {
        let spec = ModelSpec::default();
        spec.validate().unwrap();
        let back = ModelSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.hash(), spec.hash());
        assert_ne!(spec.scaled(4).hash(), spec.hash());
        let mut broken = spec.clone();
        broken.blocks[3].in_channels = 64;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn default_blocks_follow_the_layer_table() {
        let spec = ModelSpec::default();
        let plan: Vec<(BlockKind, usize, usize, usize)> = spec
            .blocks
            .iter()
            .map(|b| (b.kind, b.in_channels, b.out_channels, b.temporal_stride))
            .collect();
        use BlockKind::*;
        assert_eq!(
            plan,
            vec![
                (Basic, 3, 64, 1),
                (Bottleneck, 64, 64, 1),
                (Bottleneck, 64, 32, 1),
                (Bottleneck, 32, 128, 2),
                (Bottleneck, 128, 128, 1),
                (Bottleneck, 128, 256, 2),
                (Bottleneck, 256, 256, 1),
            ]
        );
        assert!(spec.blocks[0].is_input_block);
        assert!(spec.blocks[1..].iter().all(|b| !b.is_input_block));
        assert_eq!(spec.blocks[2].inner_channels(8), 4);
        assert_eq!(spec.blocks[6].inner_channels(8), 32);
    }

    #[test]
    fn shape_trace_small_cases() {
        let spec = ModelSpec {
            blocks: vec![BlockSpec::new(BlockKind::Basic, 3, 3, 1, 1)],
            embedding_dim: 3,
            ..ModelSpec::default()
        };
        let rows = shape_trace(&spec, [10, 17, 3]).unwrap();
        assert_eq!(rows[1].shape, vec![10, 17, 3]);

        let frames: Vec<usize> = shape_trace(&ModelSpec::default(), [7, 17, 3])
            .unwrap()
            .iter()
            .take(8)
            .map(|r| r.shape[0])
            .collect();
        assert_eq!(frames, vec![7, 7, 7, 7, 4, 4, 2, 2]);
        assert!(shape_trace(&ModelSpec::default(), [60, 16, 3]).is_err());
    }

    #[test]
    fn block_shapes() {
        let adj = AdjacencySet::build(&SkeletonTopology::coco17(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let basic = ResGcnBlock::<f32>::new(
            "b",
            &BlockSpec::new(BlockKind::Basic, 3, 64, 1, 1).input(),
            &adj,
            9,
            8,
            &mut rng,
        )
        .unwrap();
        let y = basic.infer(&Tensor::zeros(&[1, 3, 60, 17])).unwrap();
        assert_eq!(y.shape(), &[1, 64, 60, 17]);

        let bottleneck = ResGcnBlock::<f32>::new(
            "b",
            &BlockSpec::new(BlockKind::Bottleneck, 128, 256, 2, 2),
            &adj,
            9,
            8,
            &mut rng,
        )
        .unwrap();
        let y = bottleneck.infer(&Tensor::zeros(&[1, 128, 30, 17])).unwrap();
        assert_eq!(y.shape(), &[1, 256, 15, 17]);
        assert!(bottleneck.infer(&Tensor::zeros(&[1, 64, 30, 17])).is_err());
    }

    #[test]
    fn zeroed_block_passes_input_through_the_identity_residual() {
        let adj = AdjacencySet::build(&SkeletonTopology::coco17(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [BlockKind::Basic, BlockKind::Bottleneck] {
            let mut block =
                ResGcnBlock::<f64>::new("b", &BlockSpec::new(kind, 8, 8, 1, 1), &adj, 9, 8, &mut rng).unwrap();
            block.visit_mut(&mut |p| {
                if p.kind != ParamKind::Buffer {
                    p.tensor.data_mut().fill(0.0)
                }
            });
            let x = random(&[2, 8, 6, 17], 3);
            assert_eq!(block.forward(&x).unwrap(), x);
            assert_eq!(block.infer(&x).unwrap(), x);
        }
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec::default().scaled(4)
    }

    #[test]
    fn model_output_shapes_and_trace() {
        let topo = SkeletonTopology::coco17();
        let model = GaitModel::<f32>::new(&ModelSpec::default(), &topo, 1).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 60, 17, 3]);
        let traced = model.infer_trace(&x).unwrap();
        let planned: Vec<Vec<usize>> = shape_trace(model.spec(), [60, 17, 3])
            .unwrap()
            .into_iter()
            .map(|r| r.shape)
            .collect();
        assert_eq!(traced, planned);

        let small = GaitModel::<f32>::new(&tiny_spec(), &topo, 1).unwrap();
        let y = small.infer(&Tensor::zeros(&[4, 20, 17, 3])).unwrap();
        assert_eq!(y.shape(), &[4, 128]);
        let t: Vec<usize> = small
            .infer_trace(&Tensor::zeros(&[1, 20, 17, 3]))
            .unwrap()
            .iter()
            .take(8)
            .map(|s| s[0])
            .collect();
        assert_eq!(t, vec![20, 20, 20, 20, 10, 10, 5, 5]);
        assert!(small.infer(&Tensor::zeros(&[1, 3, 17, 3])).is_err());
        assert!(small.infer(&Tensor::zeros(&[1, 20, 16, 3])).is_err());
    }

    #[test]
    fn eval_forward_is_pure_and_unit_norm() {
        let topo = SkeletonTopology::coco17();
        let model = GaitModel::<f32>::new(&tiny_spec(), &topo, 3).unwrap();
        let x = kaiming::<f32, _>(&[3, 12, 17, 3], 2, &mut ChaCha8Rng::seed_from_u64(1));
        let a = model.infer(&x).unwrap();
        let b = model.infer(&x).unwrap();
        assert_eq!(a.data(), b.data());
        for row in a.data().chunks(128) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn parameter_names_are_unique() {
        let model = GaitModel::<f32>::new(&ModelSpec::default(), &SkeletonTopology::coco17(), 0).unwrap();
        let mut names = Vec::new();
        model.visit(&mut |p| names.push(p.name.clone()));
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn blocks_pass_gradient_check() {
        let adj = AdjacencySet::build(&SkeletonTopology::coco17(), 3).unwrap();
        let opts = GradCheckOptions {
            max_entries: Some(40),
            ..Default::default()
        };
        for (seed, spec) in [
            BlockSpec::new(BlockKind::Basic, 3, 4, 1, 1).input(),
            BlockSpec::new(BlockKind::Bottleneck, 4, 4, 1, 1),
            BlockSpec::new(BlockKind::Bottleneck, 4, 8, 2, 2),
        ]
        .iter()
        .enumerate()
        {
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
            let mut block = ResGcnBlock::<f64>::new("b", spec, &adj, 3, 8, &mut rng).unwrap();
            let x = random(&[2, spec.in_channels, 5, 17], seed as u64);
            let rep = check_module(&mut block, &x, &opts).unwrap();
            assert!(rep.passes(1e-4), "{rep}");
        }
    }

    #[test]
    fn whole_model_passes_gradient_check() {
        let spec = ModelSpec {
            temporal_kernel: 3,
            embedding_dim: 6,
            ..ModelSpec::default().scaled(16)
        };
        let mut model = GaitModel::<f64>::new(&spec, &SkeletonTopology::coco17(), 4).unwrap();
        let x = random(&[3, 8, 17, 3], 11);
        let opts = GradCheckOptions {
            max_entries: Some(12),
            ..Default::default()
        };
        let rep = check_module(&mut model, &x, &opts).unwrap();
        assert!(rep.passes(1e-4), "{rep}");
    }
}
