//! Neural network primitives with hand-written backward passes.
//!
//! Every layer keeps whatever it needs from its last training-mode
//! [`Module::forward`] call and consumes it in [`Module::backward`].
//! [`Module::infer`] is the side-effect-free evaluation path.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, ParamKind, Parameter, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub trait Module<T: Real> {
    /// Training-mode forward pass. Caches state for [`Module::backward`].
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Evaluation-mode forward pass.
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Propagates `grad` (w.r.t. the last forward output) back to the input,
    /// accumulating parameter gradients on the way.
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>>;

    fn visit(&self, _f: &mut dyn FnMut(&Parameter<T>)) {}

    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Parameter<T>)) {}

    /// Appends the on/off state of every rectifier from the last forward.
    fn relu_pattern(&self, _out: &mut Vec<bool>) {}
}

pub(crate) fn missing_cache(layer: &str) -> Error {
    Error::Shape(format!("{layer}: backward called without a training forward"))
}

/// Fan-in scaled normal initialization.
pub fn kaiming<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

fn expect_channels<T: Real>(x: &Tensor<T>, channels: usize, layer: &str) -> Result<()> {
    if x.shape().len() < 2 || x.shape()[1] != channels {
        return Err(Error::Shape(format!(
            "{layer}: expected {channels} channels, input shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Sums per-sample gradient contributions in sample order.
pub(crate) fn reduce_in_order<T: Real>(parts: &[Vec<T>], into: &mut [T]) {
    for part in parts {
        for (acc, &v) in into.iter_mut().zip(part) {
            *acc += v;
        }
    }
}

/// Convolution along the time axis of a `B x C x T x N` tensor with a
/// `k x 1` kernel, zero padding `(k - 1) / 2` on time only.
#[derive(Debug, Clone)]
pub struct TemporalConv<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `C_out x C_in x k x 1`
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> TemporalConv<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::Shape(format!("temporal kernel must be odd, got {kernel}")));
        }
        if stride == 0 {
            return Err(Error::Shape("temporal stride must be positive".into()));
        }
        let weight = kaiming(&[out_channels, in_channels, kernel, 1], in_channels * kernel, rng);
        Ok(TemporalConv {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: Parameter::new(format!("{name}.weight"), weight, ParamKind::Weight),
            bias: Parameter::new(
                format!("{name}.bias"),
                Tensor::zeros(&[out_channels]),
                ParamKind::Exempt,
            ),
            cache: None,
        })
    }

    pub fn output_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.stride)
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        x.expect_rank(4, "temporal conv")?;
        expect_channels(x, self.in_channels, "temporal conv")?;
        let s = x.shape();
        Ok((s[0], s[2], s[3]))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// `(C_in * k) x (T' * N)` patch matrix for one sample.
    fn im2col(&self, x: &[T], frames: usize, joints: usize) -> Vec<T> {
        let out_frames = self.output_frames(frames);
        let pad = (self.kernel - 1) / 2;
        let width = out_frames * joints;
        let mut cols = vec![T::zero(); self.in_channels * self.kernel * width];
        for ci in 0..self.in_channels {
            let plane = &x[ci * frames * joints..(ci + 1) * frames * joints];
            for j in 0..self.kernel {
                let row = &mut cols[(ci * self.kernel + j) * width..][..width];
                for to in 0..out_frames {
                    let ti = (to * self.stride + j) as isize - pad as isize;
                    if ti < 0 || ti as usize >= frames {
                        continue;
                    }
                    let ti = ti as usize;
                    row[to * joints..(to + 1) * joints]
                        .copy_from_slice(&plane[ti * joints..(ti + 1) * joints]);
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], dx: &mut [T], frames: usize, joints: usize) {
        let out_frames = self.output_frames(frames);
        let pad = (self.kernel - 1) / 2;
        let width = out_frames * joints;
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * frames * joints..(ci + 1) * frames * joints];
            for j in 0..self.kernel {
                let row = &cols[(ci * self.kernel + j) * width..][..width];
                for to in 0..out_frames {
                    let ti = (to * self.stride + j) as isize - pad as isize;
                    if ti < 0 || ti as usize >= frames {
                        continue;
                    }
                    let ti = ti as usize;
                    for (d, &c) in plane[ti * joints..(ti + 1) * joints]
                        .iter_mut()
                        .zip(&row[to * joints..(to + 1) * joints])
                    {
                        *d += c;
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, frames, joints) = self.check(x)?;
        let out_frames = self.output_frames(frames);
        let width = out_frames * joints;
        let in_size = self.in_channels * frames * joints;
        let out_size = self.out_channels * width;
        let mut out = Tensor::zeros(&[batch, self.out_channels, out_frames, joints]);
        let w = MatRef::new(
            self.weight.values(),
            self.out_channels,
            self.in_channels * self.kernel,
        );
        let bias = self.bias.values();
        out.data_mut()
            .par_chunks_mut(out_size.max(1))
            .enumerate()
            .for_each(|(b, out_b)| {
                let x_b = &x.data()[b * in_size..(b + 1) * in_size];
                for (co, row) in out_b.chunks_mut(width.max(1)).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias[co]);
                }
                if self.is_pointwise() {
                    gemm(T::one(), w, MatRef::new(x_b, self.in_channels, width), T::one(), out_b);
                } else {
                    let cols = self.im2col(x_b, frames, joints);
                    let cols = MatRef::new(&cols, self.in_channels * self.kernel, width);
                    gemm(T::one(), w, cols, T::one(), out_b);
                }
            });
        Ok(out)
    }
}

impl<T: Real> Module<T> for TemporalConv<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.run(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(|| missing_cache("temporal conv"))?;
        let (batch, frames, joints) = self.check(&x)?;
        let out_frames = self.output_frames(frames);
        grad.expect_shape(&[batch, self.out_channels, out_frames, joints])?;
        let width = out_frames * joints;
        let in_size = self.in_channels * frames * joints;
        let out_size = self.out_channels * width;
        let ck = self.in_channels * self.kernel;
        let w = MatRef::new(self.weight.values(), self.out_channels, ck);

        let mut dx = Tensor::zeros(x.shape());
        let partial: Vec<(Vec<T>, Vec<T>)> = dx
            .data_mut()
            .par_chunks_mut(in_size.max(1))
            .enumerate()
            .map(|(b, dx_b)| {
                let x_b = &x.data()[b * in_size..(b + 1) * in_size];
                let g_b = &grad.data()[b * out_size..(b + 1) * out_size];
                let g = MatRef::new(g_b, self.out_channels, width);
                let mut dw = vec![T::zero(); self.out_channels * ck];
                let db: Vec<T> = g_b
                    .chunks(width.max(1))
                    .map(|row| row.iter().copied().sum())
                    .collect();
                if self.is_pointwise() {
                    gemm(T::one(), g, MatRef::new(x_b, ck, width).t(), T::zero(), &mut dw);
                    gemm(T::one(), w.t(), g, T::zero(), dx_b);
                } else {
                    let cols = self.im2col(x_b, frames, joints);
                    gemm(T::one(), g, MatRef::new(&cols, ck, width).t(), T::zero(), &mut dw);
                    let mut dcols = vec![T::zero(); ck * width];
                    gemm(T::one(), w.t(), g, T::zero(), &mut dcols);
                    self.col2im(&dcols, dx_b, frames, joints);
                }
                (dw, db)
            })
            .collect();
        let (dws, dbs): (Vec<_>, Vec<_>) = partial.into_iter().unzip();
        reduce_in_order(&dws, self.weight.grad_mut());
        reduce_in_order(&dbs, self.bias.grad_mut());
        Ok(dx)
    }

    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
}

/// Per-channel batch normalization over every axis except axis 1.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Parameter<T>,
    pub running_var: Parameter<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: Parameter::new(
                format!("{name}.gamma"),
                Tensor::full(&[channels], T::one()),
                ParamKind::Exempt,
            ),
            beta: Parameter::new(
                format!("{name}.beta"),
                Tensor::zeros(&[channels]),
                ParamKind::Exempt,
            ),
            running_mean: Parameter::new(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            ),
            running_var: Parameter::new(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
                ParamKind::Buffer,
            ),
            cache: None,
        }
    }

    /// (batch, spatial extent per channel)
    fn layout(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        expect_channels(x, self.channels, "batch norm")?;
        let s = x.shape();
        Ok((s[0], s[2..].iter().product()))
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, inner) = self.layout(x)?;
        let count = batch * inner;
        if count < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch norm needs at least 2 values per channel in training, got {count}"
            )));
        }
        let c = self.channels;
        let n = T::from_f64(count as f64);
        let eps = T::from_f64(BN_EPS);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..batch {
            for ch in 0..c {
                let plane = &x.data()[(b * c + ch) * inner..][..inner];
                mean[ch] += plane.iter().copied().sum();
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        for b in 0..batch {
            for ch in 0..c {
                let plane = &x.data()[(b * c + ch) * inner..][..inner];
                var[ch] += plane.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / n);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut out = Tensor::zeros(x.shape());
        let mut normalized = vec![T::zero(); x.len()];
        let (gamma, beta) = (self.gamma.values(), self.beta.values());
        for b in 0..batch {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out.data_mut()[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }

        let momentum = T::from_f64(BN_MOMENTUM);
        let unbias = n / (n - T::one());
        let rm = self.running_mean.tensor.data_mut();
        for (r, &m) in rm.iter_mut().zip(&mean) {
            *r = (T::one() - momentum) * *r + momentum * m;
        }
        let rv = self.running_var.tensor.data_mut();
        for (r, &v) in rv.iter_mut().zip(&var) {
            *r = (T::one() - momentum) * *r + momentum * v * unbias;
        }
        self.cache = Some(BnCache { normalized, inv_std });
        Ok(out)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, inner) = self.layout(x)?;
        let c = self.channels;
        let eps = T::from_f64(BN_EPS);
        let (gamma, beta) = (self.gamma.values(), self.beta.values());
        let (rm, rv) = (self.running_mean.values(), self.running_var.values());
        let scale: Vec<T> = (0..c).map(|ch| gamma[ch] / (rv[ch] + eps).sqrt()).collect();
        let mut out = x.clone();
        for b in 0..batch {
            for ch in 0..c {
                let plane = &mut out.data_mut()[(b * c + ch) * inner..][..inner];
                for v in plane {
                    *v = (*v - rm[ch]) * scale[ch] + beta[ch];
                }
            }
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batch norm"))?;
        let (batch, inner) = self.layout(grad)?;
        if grad.len() != cache.normalized.len() {
            return Err(Error::Shape("batch norm: gradient shape differs from forward".into()));
        }
        let c = self.channels;
        let n = T::from_f64((batch * inner) as f64);
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for b in 0..batch {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    let g = grad.data()[i];
                    sum_g[ch] += g;
                    sum_gx[ch] += g * cache.normalized[i];
                }
            }
        }
        let gamma = self.gamma.values().to_vec();
        let mut dx = Tensor::zeros(grad.shape());
        for b in 0..batch {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                let k = gamma[ch] * cache.inv_std[ch] / n;
                for i in off..off + inner {
                    dx.data_mut()[i] =
                        k * (n * grad.data()[i] - sum_g[ch] - cache.normalized[i] * sum_gx[ch]);
                }
            }
        }
        for (acc, v) in self.gamma.grad_mut().iter_mut().zip(&sum_gx) {
            *acc += *v;
        }
        for (acc, v) in self.beta.grad_mut().iter_mut().zip(&sum_g) {
            *acc += *v;
        }
        Ok(dx)
    }

    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }
}

impl<T: Real> Module<T> for Relu {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.mask = Some(x.data().iter().map(|&v| v > T::zero()).collect());
        Module::<T>::infer(self, x)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.map(|v| if v > T::zero() { v } else { T::zero() }))
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.as_ref().ok_or_else(|| missing_cache("relu"))?;
        if mask.len() != grad.len() {
            return Err(Error::Shape("relu: gradient shape differs from forward".into()));
        }
        let mut dx = grad.clone();
        for (g, &on) in dx.data_mut().iter_mut().zip(mask) {
            if !on {
                *g = T::zero();
            }
        }
        Ok(dx)
    }

    fn relu_pattern(&self, out: &mut Vec<bool>) {
        if let Some(mask) = &self.mask {
            out.extend_from_slice(mask);
        }
    }
}

/// Mean over every axis after the channel axis: `B x C x ... -> B x C`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool::default()
    }
}

impl<T: Real> Module<T> for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = Module::<T>::infer(self, x)?;
        self.input_shape = Some(x.shape().to_vec());
        Ok(out)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() < 3 {
            return Err(Error::Shape(format!(
                "global pool expects B x C x ..., got {:?}",
                x.shape()
            )));
        }
        let (batch, channels) = (x.shape()[0], x.shape()[1]);
        let inner: usize = x.shape()[2..].iter().product();
        let scale = T::one() / T::from_f64(inner as f64);
        let data = x
            .data()
            .chunks(inner.max(1))
            .take(batch * channels)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        Tensor::from_vec(&[batch, channels], data)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.take().ok_or_else(|| missing_cache("global pool"))?;
        grad.expect_shape(&shape[..2])?;
        let inner: usize = shape[2..].iter().product();
        let scale = T::one() / T::from_f64(inner as f64);
        let mut dx = Tensor::zeros(&shape);
        for (plane, &g) in dx.data_mut().chunks_mut(inner.max(1)).zip(grad.data()) {
            plane.iter_mut().for_each(|v| *v = g * scale);
        }
        Ok(dx)
    }
}

/// Affine map `B x C_in -> B x C_out` with weight `C_in x C_out`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Linear {
            in_features,
            out_features,
            weight: Parameter::new(
                format!("{name}.weight"),
                kaiming(&[in_features, out_features], in_features, rng),
                ParamKind::Weight,
            ),
            bias: Parameter::new(
                format!("{name}.bias"),
                Tensor::zeros(&[out_features]),
                ParamKind::Exempt,
            ),
            cache: None,
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<usize> {
        x.expect_rank(2, "linear map")?;
        if x.shape()[1] != self.in_features {
            return Err(Error::Shape(format!(
                "linear map expects {} input features, got {:?}",
                self.in_features,
                x.shape()
            )));
        }
        Ok(x.shape()[0])
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check(x)?;
        let mut out = Tensor::zeros(&[batch, self.out_features]);
        for row in out.data_mut().chunks_mut(self.out_features.max(1)) {
            row.copy_from_slice(self.bias.values());
        }
        gemm(
            T::one(),
            MatRef::new(x.data(), batch, self.in_features),
            MatRef::new(self.weight.values(), self.in_features, self.out_features),
            T::one(),
            out.data_mut(),
        );
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(|| missing_cache("linear map"))?;
        let batch = self.check(&x)?;
        grad.expect_shape(&[batch, self.out_features])?;
        let g = MatRef::new(grad.data(), batch, self.out_features);
        let xm = MatRef::new(x.data(), batch, self.in_features);
        gemm(T::one(), xm.t(), g, T::one(), self.weight.grad_mut());
        let db = self.bias.grad_mut();
        for row in grad.data().chunks(self.out_features.max(1)) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        gemm(
            T::one(),
            g,
            MatRef::new(self.weight.values(), self.in_features, self.out_features).t(),
            T::zero(),
            dx.data_mut(),
        );
        Ok(dx)
    }

    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Row-wise projection onto the unit sphere: `B x D -> B x D`.
#[derive(Debug, Clone, Default)]
pub struct L2Normalize<T> {
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Real> L2Normalize<T> {
    pub fn new() -> Self {
        L2Normalize { cache: None }
    }

    fn run(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        x.expect_rank(2, "l2 normalize")?;
        let dim = x.shape()[1];
        let tiny = T::from_f64(1e-12);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.shape()[0]);
        for row in out.data_mut().chunks_mut(dim.max(1)) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny);
            row.iter_mut().for_each(|v| *v = *v / norm);
            norms.push(norm);
        }
        Ok((out, norms))
    }
}

impl<T: Real> Module<T> for L2Normalize<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, norms) = Self::run(x)?;
        self.cache = Some((out.clone(), norms));
        Ok(out)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Self::run(x)?.0)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, norms) = self.cache.take().ok_or_else(|| missing_cache("l2 normalize"))?;
        grad.expect_shape(y.shape())?;
        let dim = y.shape()[1];
        let mut dx = grad.clone();
        for ((row, y_row), &norm) in dx
            .data_mut()
            .chunks_mut(dim.max(1))
            .zip(y.data().chunks(dim.max(1)))
            .zip(&norms)
        {
            let proj: T = row.iter().zip(y_row).map(|(&g, &v)| g * v).sum();
            for (g, &v) in row.iter_mut().zip(y_row) {
                *g = (*g - v * proj) / norm;
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_module, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        kaiming(shape, 2, &mut rng(seed))
    }

    #[test]
    fn pointwise_identity_kernel_is_identity() {
        let mut conv = TemporalConv::<f64>::new("c", 3, 3, 1, 1, &mut rng(0)).unwrap();
        let w = conv.weight.tensor.data_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let x = random(&[2, 3, 5, 4], 1);
        assert_eq!(conv.infer(&x).unwrap(), x);
    }

    #[test]
    fn three_tap_sum_kernel_on_a_ramp() {
        let mut conv = TemporalConv::<f64>::new("c", 1, 1, 3, 1, &mut rng(0)).unwrap();
        conv.weight.tensor.data_mut().copy_from_slice(&[1.0, 1.0, 1.0]);
        let x = Tensor::from_vec(&[1, 1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(conv.infer(&x).unwrap().data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn stride_two_halves_frames_rounding_up() {
        let conv = TemporalConv::<f32>::new("c", 2, 4, 9, 2, &mut rng(0)).unwrap();
        let x = Tensor::zeros(&[1, 2, 60, 17]);
        let y = conv.infer(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 30, 17]);
        let conv2 = TemporalConv::<f32>::new("c", 4, 4, 9, 2, &mut rng(0)).unwrap();
        assert_eq!(conv2.infer(&y).unwrap().shape(), &[1, 4, 15, 17]);
        assert_eq!(conv.output_frames(7), 4);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let conv = TemporalConv::<f32>::new("c", 2, 4, 3, 1, &mut rng(0)).unwrap();
        assert!(matches!(conv.infer(&Tensor::zeros(&[1, 3, 5, 2])), Err(Error::Shape(_))));
        assert!(TemporalConv::<f32>::new("c", 2, 4, 4, 1, &mut rng(0)).is_err());
    }

    #[test]
    fn conv_is_linear_in_input_and_weight() {
        let conv = TemporalConv::<f64>::new("c", 2, 3, 5, 2, &mut rng(3)).unwrap();
        let (x1, x2) = (random(&[2, 2, 7, 3], 4), random(&[2, 2, 7, 3], 5));
        let combo = x1.scale(2.0).add(&x2.scale(-0.5)).unwrap();
        let lhs = conv.infer(&combo).unwrap();
        let rhs = conv.infer(&x1).unwrap().scale(2.0).add(&conv.infer(&x2).unwrap().scale(-0.5)).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut c1 = conv.clone();
        let mut c2 = conv.clone();
        c2.weight.tensor = random(&[3, 2, 5, 1], 9).with_grad();
        let mut sum = conv.clone();
        for ((s, a), b) in sum
            .weight
            .tensor
            .data_mut()
            .iter_mut()
            .zip(c1.weight.values())
            .zip(c2.weight.values())
        {
            *s = a + b;
        }
        c1.bias.tensor.data_mut().fill(0.0);
        c2.bias.tensor.data_mut().fill(0.0);
        sum.bias.tensor.data_mut().fill(0.0);
        let lhs = sum.infer(&x1).unwrap();
        let rhs = c1.infer(&x1).unwrap().add(&c2.infer(&x1).unwrap()).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_eval_with_default_stats_is_identity() {
        let bn = BatchNorm::<f64>::new("bn", 3);
        let x = random(&[2, 3, 4, 5], 2);
        let y = bn.infer(&x).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            // running var 1 plus eps
            assert!((a / (1.0 + BN_EPS).sqrt() - b).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_norm_train_standardizes_channels() {
        let mut bn = BatchNorm::<f64>::new("bn", 2);
        let x = random(&[3, 2, 4, 5], 7).map(|v| 3.0 * v + 1.5);
        let y = bn.forward(&x).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y.data()[(b * 2 + ch) * 20..(b * 2 + ch + 1) * 20].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_constant_channel_maps_to_zero() {
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        let x = Tensor::full(&[2, 1, 3, 2], 4.25);
        let y = bn.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_rejects_single_value_batches() {
        let mut bn = BatchNorm::<f32>::new("bn", 2);
        assert!(matches!(
            bn.forward(&Tensor::zeros(&[1, 2, 1, 1])),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(bn.infer(&Tensor::zeros(&[1, 2, 1, 1])).is_ok());
    }

    #[test]
    fn pooling_examples() {
        let pool = GlobalAvgPool::new();
        let ones = Tensor::<f32>::full(&[1, 256, 15, 17], 1.0);
        let y = Module::<f32>::infer(&pool, &ones).unwrap();
        assert_eq!(y.shape(), &[1, 256]);
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));

        let mut x = Tensor::<f64>::zeros(&[1, 2, 15, 17]);
        x.data_mut()[15 * 17 + 40] = 7.0;
        let y = Module::<f64>::infer(&pool, &x).unwrap();
        assert_eq!(y.data(), &[0.0, 7.0 / 255.0]);

        let c = 2.5;
        let x = random(&[2, 3, 4, 5], 8);
        let a = Module::<f64>::infer(&pool, &x.scale(c)).unwrap();
        let b = Module::<f64>::infer(&pool, &x).unwrap().scale(c);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_examples() {
        let mut lin = Linear::<f64>::new("fc", 2, 2, &mut rng(0));
        lin.weight.tensor.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 2.0]);
        lin.bias.tensor.data_mut().copy_from_slice(&[1.0, 1.0]);
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(lin.infer(&x).unwrap().data(), &[2.0, 5.0]);

        lin.weight.tensor.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        lin.bias.tensor.data_mut().fill(0.0);
        assert_eq!(lin.infer(&x).unwrap(), x);

        let wide = Linear::<f32>::new("fc", 256, 128, &mut rng(0));
        assert_eq!(wide.infer(&Tensor::zeros(&[1, 256])).unwrap().shape(), &[1, 128]);
        assert!(wide.infer(&Tensor::zeros(&[1, 255])).is_err());
    }

    #[test]
    fn linear_map_gradient_within_one_in_a_million() {
        let mut lin = Linear::<f64>::new("fc", 5, 4, &mut rng(11));
        let x = random(&[3, 5], 12);
        let report = check_module(&mut lin, &x, &GradCheckOptions::default()).unwrap();
        assert!(report.max_relative_error() < 1e-6, "{report}");
    }

    #[test]
    fn primitives_pass_gradient_check_over_many_seeds() {
        let opts = GradCheckOptions::default();
        for seed in 0..20u64 {
            let mut r = rng(100 + seed);
            let b = 1 + (seed as usize % 3);
            let t = 3 + (seed as usize % 5);
            let n = 2 + (seed as usize % 3);
            let stride = 1 + (seed as usize % 2);
            let kernel = [1, 3, 5][seed as usize % 3];

            let mut conv = TemporalConv::<f64>::new("c", 2, 3, kernel, stride, &mut r).unwrap();
            let x = random(&[b, 2, t, n], seed);
            let rep = check_module(&mut conv, &x, &opts).unwrap();
            assert!(rep.max_relative_error() < 1e-4, "conv seed {seed}: {rep}");

            let mut bn = BatchNorm::<f64>::new("bn", 2);
            bn.gamma.tensor.data_mut().copy_from_slice(&[0.7, -1.3]);
            bn.beta.tensor.data_mut().copy_from_slice(&[0.1, 0.4]);
            let rep = check_module(&mut bn, &x, &opts).unwrap();
            assert!(rep.max_relative_error() < 1e-4, "bn seed {seed}: {rep}");

            let mut pool = GlobalAvgPool::new();
            let rep = check_module(&mut pool, &x, &opts).unwrap();
            assert!(rep.max_relative_error() < 1e-4, "pool seed {seed}: {rep}");

            let mut relu = Relu::new();
            let rep = check_module(&mut relu, &x, &opts).unwrap();
            assert!(rep.max_relative_error() < 1e-4, "relu seed {seed}: {rep}");

            let mut lin = Linear::<f64>::new("fc", n, 3, &mut r);
            let rep = check_module(&mut lin, &random(&[b, n], seed + 50), &opts).unwrap();
            assert!(rep.max_relative_error() < 1e-4, "linear seed {seed}: {rep}");

            let mut norm = L2Normalize::<f64>::new();
            let rep = check_module(&mut norm, &random(&[b, 4], seed + 60), &opts).unwrap();
            assert!(rep.max_relative_error() < 1e-4, "l2 seed {seed}: {rep}");
        }
    }
}
