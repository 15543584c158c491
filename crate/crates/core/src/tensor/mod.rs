//! Dense `N x C x H x W` tensors and the operations the networks are built from.

mod checkpoint;
mod conv;
mod graph;
mod init;
mod optim;
mod wide;

use std::fmt;

pub use checkpoint::{ArchDescriptor, Checkpoint, ModelKind, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{
    dilated_conv2d, dilated_conv2d_backward, receptive_field_extent, ConvGrads, ConvParams,
};
pub use graph::{Conv, Eval, Graph, NodeGrads, ParamGrads, ParamId, ParamStore, Tape, Var};
pub use init::{gaussian_init, WeightInit, INIT_STD};
pub use optim::{sgd_step, OptimizerState, SgdConfig};
pub use wide::{Wide, WideValue};

use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_channels(&self, c: usize) -> Self {
        Self { c, ..*self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::filled(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(dim_err!(
                "tensor {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Channel slice `[start, start + count)` of batch item `n`.
    pub fn channel_slice(&self, n: usize, start: usize, count: usize) -> &[f32] {
        let p = self.shape.plane();
        let base = (n * self.shape.c + start) * p;
        &self.data[base..base + count * p]
    }

    /// Stacks same-shaped tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| dim_err!("cannot stack zero tensors"))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (first.c, first.h, first.w) {
                return Err(dim_err!("cannot stack {} with {}", t.shape, first));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape { n, ..first }, data)
    }

    /// Batch item `n` as a `1 x C x H x W` tensor.
    pub fn batch_item(&self, n: usize) -> Result<Tensor> {
        if n >= self.shape.n {
            return Err(dim_err!("batch index {n} out of range for {}", self.shape));
        }
        let len = self.shape.c * self.shape.plane();
        Tensor::from_vec(
            Shape { n: 1, ..self.shape },
            self.data[n * len..(n + 1) * len].to_vec(),
        )
    }

    /// Spatial window `[y0, y0+h) x [x0, x0+w)` of every batch item and channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        if y0 + h > s.h || x0 + w > s.w {
            return Err(dim_err!("crop {h}x{w}@({y0},{x0}) exceeds {s}"));
        }
        let mut data = Vec::with_capacity(s.n * s.c * h * w);
        for nc in 0..s.n * s.c {
            for y in y0..y0 + h {
                let row = (nc * s.h + y) * s.w;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Tensor::from_vec(Shape::new(s.n, s.c, h, w), data)
    }
}

/// Concatenates along the channel axis. Inputs must agree on `N`, `H`, `W`.
pub fn concat_channels(tensors: &[&Tensor]) -> Result<Tensor> {
    let first = tensors
        .first()
        .ok_or_else(|| dim_err!("concat of zero tensors"))?
        .shape;
    let mut channels = 0;
    for t in tensors {
        let s = t.shape;
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(dim_err!("concat: {s} does not match {first} in N/H/W"));
        }
        channels += s.c;
    }
    let out_shape = first.with_channels(channels);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for t in tensors {
            data.extend_from_slice(t.channel_slice(n, 0, t.shape.c));
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Inverse of [`concat_channels`]: splits into consecutive channel groups.
pub fn split_channels(t: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let s = t.shape;
    let total: usize = sizes.iter().sum();
    if total != s.c {
        return Err(dim_err!(
            "split sizes {sizes:?} do not sum to {} channels",
            s.c
        ));
    }
    let mut out: Vec<Vec<f32>> = sizes
        .iter()
        .map(|&c| Vec::with_capacity(s.n * c * s.plane()))
        .collect();
    for n in 0..s.n {
        let mut start = 0;
        for (dst, &c) in out.iter_mut().zip(sizes) {
            dst.extend_from_slice(t.channel_slice(n, start, c));
            start += c;
        }
    }
    out.into_iter()
        .zip(sizes)
        .map(|(data, &c)| Tensor::from_vec(s.with_channels(c), data))
        .collect()
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape,
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Passes `grad_out` where `input > 0`.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape != grad_out.shape {
        return Err(dim_err!(
            "relu backward: {} vs {}",
            input.shape,
            grad_out.shape
        ));
    }
    Ok(Tensor {
        shape: input.shape,
        data: input
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

#[inline]
pub(crate) fn sigmoid_f32(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
