//! Parameter storage and the two executors the network wiring runs on.
//!
//! Architectures are written once against [`Graph`]. [`Eval`] runs them
//! eagerly and drops intermediates; [`Tape`] records every node so that
//! [`Tape::backward`] can produce parameter and node gradients. Both call the
//! same kernels, so their forward values are bit-identical.

use std::rc::Rc;

use rand::Rng;

use super::conv::{conv_backward, conv_forward};
use super::{concat_channels, gaussian_init, sigmoid_f32, split_channels, Shape, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    /// Registers `{name}.weight` (Gaussian, decayed) and `{name}.bias` (zero).
    #[allow(clippy::too_many_arguments)]
    pub fn add_conv<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        std: f64,
        rng: &mut R,
    ) -> Conv {
        let weight = gaussian_init(
            Shape::new(out_channels, in_channels, kernel, kernel),
            std,
            rng,
        );
        let weight = self.add(format!("{name}.weight"), weight, true);
        let bias = self.add(
            format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, out_channels, 1, 1)),
            false,
        );
        Conv {
            weight,
            bias,
            dilation,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().fill(0.0);
        }
    }
}

/// Handle to a convolution whose weights live in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

/// Gradients aligned with the parameters of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            grads: store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_index(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Tensor> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Tensor> {
        self.grads.iter_mut()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

/// The operation set the networks are written against.
pub trait Graph {
    type Var: Clone;

    fn params(&self) -> &ParamStore;
    /// A constant leaf.
    fn input(&mut self, t: Tensor) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor;
    /// Value of a scalar node with 64-bit precision.
    fn scalar(&self, v: &Self::Var) -> f64;

    fn conv(&mut self, x: &Self::Var, conv: Conv) -> Result<Self::Var>;
    fn relu(&mut self, x: &Self::Var) -> Self::Var;
    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var;
    /// Two-channel logits to the softmax probability of channel 0.
    fn glow_prob(&mut self, logits: &Self::Var) -> Result<Self::Var>;
    /// `1` where `x > 0.5`, else `0`. Passes no gradient.
    fn harden(&mut self, x: &Self::Var) -> Self::Var;
    fn concat(&mut self, xs: &[&Self::Var]) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// `mask (N,1,H,W)` broadcast over the channels of `x (N,C,H,W)`.
    fn mul_mask(&mut self, mask: &Self::Var, x: &Self::Var) -> Result<Self::Var>;

    /// Mean squared error against a constant target.
    fn mse(&mut self, pred: &Self::Var, target: &Tensor) -> Result<Self::Var>;
    /// Mean binary cross-entropy of the two-channel softmax (channel 0 is the
    /// positive class) against a `{0,1}` target.
    fn logit_bce(&mut self, logits: &Self::Var, target: &Tensor) -> Result<Self::Var>;
    fn weighted_sum(&mut self, terms: &[(&Self::Var, f64)]) -> Result<Self::Var>;

    fn shape(&self, v: &Self::Var) -> Shape {
        self.value(v).shape()
    }
}

// ---------------------------------------------------------------------------
// Shared forward kernels
// ---------------------------------------------------------------------------

pub(super) fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{op}: {} vs {}", a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::from_vec(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("same shape")
}

fn map(a: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::from_vec(a.shape(), a.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

pub(super) fn check_two_channel(logits: &Tensor) -> Result<()> {
    if logits.shape().c != 2 {
        return Err(dim_err!(
            "expected 2-channel logits, got {}",
            logits.shape()
        ));
    }
    Ok(())
}

fn fwd_glow_prob(logits: &Tensor) -> Result<Tensor> {
    check_two_channel(logits)?;
    let s = logits.shape();
    let p = s.plane();
    let mut out = Vec::with_capacity(s.n * p);
    for n in 0..s.n {
        let l = logits.channel_slice(n, 0, 2);
        out.extend(
            l[..p]
                .iter()
                .zip(&l[p..])
                .map(|(&a, &b)| sigmoid_f32(a - b)),
        );
    }
    Tensor::from_vec(s.with_channels(1), out)
}

fn fwd_harden(x: &Tensor) -> Tensor {
    map(x, |v| if v > 0.5 { 1.0 } else { 0.0 })
}

pub(super) fn check_mask(mask: &Tensor, x: &Tensor) -> Result<()> {
    let (m, s) = (mask.shape(), x.shape());
    if m.c != 1 || (m.n, m.h, m.w) != (s.n, s.h, s.w) {
        return Err(dim_err!("mask {m} cannot broadcast over {s}"));
    }
    Ok(())
}

fn fwd_mul_mask(mask: &Tensor, x: &Tensor) -> Result<Tensor> {
    check_mask(mask, x)?;
    let s = x.shape();
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let m = &mask.data()[n * p..(n + 1) * p];
        for c in 0..s.c {
            let base = (n * s.c + c) * p;
            let dst = &mut out.data_mut()[base..base + p];
            for ((o, &mv), &xv) in dst.iter_mut().zip(m).zip(&x.data()[base..base + p]) {
                *o = mv * xv;
            }
        }
    }
    Ok(out)
}

fn fwd_mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape("mse", pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

pub(super) fn check_binary_target(logits: &Tensor, target: &Tensor) -> Result<()> {
    check_two_channel(logits)?;
    if target.shape() != logits.shape().with_channels(1) {
        return Err(dim_err!(
            "glow target {} does not match logits {}",
            target.shape(),
            logits.shape()
        ));
    }
    if let Some(v) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!(
            "glow target must be binary, found {v}"
        )));
    }
    Ok(())
}

#[inline]
pub(super) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn fwd_logit_bce(logits: &Tensor, target: &Tensor) -> Result<f64> {
    check_binary_target(logits, target)?;
    let s = logits.shape();
    let p = s.plane();
    let mut sum = 0.0;
    for n in 0..s.n {
        let l = logits.channel_slice(n, 0, 2);
        let y = &target.data()[n * p..(n + 1) * p];
        for i in 0..p {
            let z = l[i] as f64 - l[p + i] as f64;
            sum += softplus(z) - y[i] as f64 * z;
        }
    }
    Ok(sum / (s.n * p) as f64)
}

pub(super) fn check_scalar(t: &Tensor) -> Result<()> {
    if t.shape() != Shape::scalar() {
        return Err(dim_err!("expected a scalar, got {}", t.shape()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Eager executor
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct EvalValue {
    tensor: Tensor,
    scalar: Option<f64>,
}

/// Forward-only execution; intermediates are freed as soon as they drop.
pub struct Eval<'p> {
    params: &'p ParamStore,
}

impl<'p> Eval<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params }
    }

    fn wrap(t: Tensor) -> Rc<EvalValue> {
        Rc::new(EvalValue {
            tensor: t,
            scalar: None,
        })
    }

    fn wrap_scalar(v: f64) -> Rc<EvalValue> {
        Rc::new(EvalValue {
            tensor: Tensor::scalar(v as f32),
            scalar: Some(v),
        })
    }

    /// Extracts the tensor behind a variable, cloning only if still shared.
    pub fn take(v: Rc<EvalValue>) -> Tensor {
        Rc::try_unwrap(v)
            .map(|e| e.tensor)
            .unwrap_or_else(|rc| rc.tensor.clone())
    }
}

impl Graph for Eval<'_> {
    type Var = Rc<EvalValue>;

    fn params(&self) -> &ParamStore {
        self.params
    }

    fn input(&mut self, t: Tensor) -> Self::Var {
        Self::wrap(t)
    }

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor {
        &v.tensor
    }

    fn scalar(&self, v: &Self::Var) -> f64 {
        v.scalar.unwrap_or_else(|| v.tensor.data()[0] as f64)
    }

    fn conv(&mut self, x: &Self::Var, conv: Conv) -> Result<Self::Var> {
        conv_forward(
            &x.tensor,
            self.params.get(conv.weight),
            self.params.get(conv.bias),
            conv.dilation,
        )
        .map(Self::wrap)
    }

    fn relu(&mut self, x: &Self::Var) -> Self::Var {
        Self::wrap(super::relu(&x.tensor))
    }

    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var {
        Self::wrap(map(&x.tensor, sigmoid_f32))
    }

    fn glow_prob(&mut self, logits: &Self::Var) -> Result<Self::Var> {
        fwd_glow_prob(&logits.tensor).map(Self::wrap)
    }

    fn harden(&mut self, x: &Self::Var) -> Self::Var {
        Self::wrap(fwd_harden(&x.tensor))
    }

    fn concat(&mut self, xs: &[&Self::Var]) -> Result<Self::Var> {
        let ts: Vec<&Tensor> = xs.iter().map(|v| &v.tensor).collect();
        concat_channels(&ts).map(Self::wrap)
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        same_shape("add", &a.tensor, &b.tensor)?;
        Ok(Self::wrap(zip_map(&a.tensor, &b.tensor, |x, y| x + y)))
    }

    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        same_shape("sub", &a.tensor, &b.tensor)?;
        Ok(Self::wrap(zip_map(&a.tensor, &b.tensor, |x, y| x - y)))
    }

    fn mul_mask(&mut self, mask: &Self::Var, x: &Self::Var) -> Result<Self::Var> {
        fwd_mul_mask(&mask.tensor, &x.tensor).map(Self::wrap)
    }

    fn mse(&mut self, pred: &Self::Var, target: &Tensor) -> Result<Self::Var> {
        fwd_mse(&pred.tensor, target).map(Self::wrap_scalar)
    }

    fn logit_bce(&mut self, logits: &Self::Var, target: &Tensor) -> Result<Self::Var> {
        fwd_logit_bce(&logits.tensor, target).map(Self::wrap_scalar)
    }

    fn weighted_sum(&mut self, terms: &[(&Self::Var, f64)]) -> Result<Self::Var> {
        let mut acc = 0.0;
        for (v, w) in terms {
            check_scalar(&v.tensor)?;
            acc += w * self.scalar(v);
        }
        Ok(Self::wrap_scalar(acc))
    }
}

// ---------------------------------------------------------------------------
// Recording executor
// ---------------------------------------------------------------------------

/// Index of a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Conv { x: Var, conv: Conv },
    Relu(Var),
    Sigmoid(Var),
    GlowProb(Var),
    Harden,
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    MulMask { mask: Var, x: Var },
    Mse { pred: Var, target: Tensor },
    LogitBce { logits: Var, target: Tensor },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    scalar: Option<f64>,
    op: Op,
}

/// Records a forward pass for reverse-mode differentiation.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Gradients of every recorded node (absent where nothing flowed).
#[derive(Debug)]
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            scalar: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, v: f64, op: Op) -> Var {
        self.nodes.push(Node {
            value: Tensor::scalar(v as f32),
            scalar: Some(v),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Reverse sweep from a scalar `loss` node, seeded with `d loss = 1`.
    pub fn backward(&self, loss: Var) -> Result<(ParamGrads, NodeGrads)> {
        check_scalar(self.val(loss))?;
        let mut pgrads = ParamGrads::zeros(self.params);
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
            match slot {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Harden => {}
                Op::Conv { x, conv } => {
                    let (wid, bid) = (conv.weight.index(), conv.bias.index());
                    let mut gw = std::mem::replace(&mut pgrads.grads[wid], Tensor::scalar(0.0));
                    let mut gb = std::mem::replace(&mut pgrads.grads[bid], Tensor::scalar(0.0));
                    let gin = conv_backward(
                        self.val(*x),
                        self.params.get(conv.weight),
                        conv.dilation,
                        &g,
                        gw.data_mut(),
                        gb.data_mut(),
                    )?;
                    pgrads.grads[wid] = gw;
                    pgrads.grads[bid] = gb;
                    accumulate(&mut grads[x.0], gin);
                }
                Op::Relu(x) => {
                    let gin = super::relu_backward(self.val(*x), &g)?;
                    accumulate(&mut grads[x.0], gin);
                }
                Op::Sigmoid(x) => {
                    let gin = zip_map(&node.value, &g, |y, g| g * y * (1.0 - y));
                    accumulate(&mut grads[x.0], gin);
                }
                Op::GlowProb(x) => {
                    let s = self.val(*x).shape();
                    let p = s.plane();
                    let mut gin = Tensor::zeros(s);
                    for n in 0..s.n {
                        for i in 0..p {
                            let y = node.value.data()[n * p + i];
                            let d = g.data()[n * p + i] * y * (1.0 - y);
                            gin.data_mut()[(n * 2) * p + i] = d;
                            gin.data_mut()[(n * 2 + 1) * p + i] = -d;
                        }
                    }
                    accumulate(&mut grads[x.0], gin);
                }
                Op::Concat(xs) => {
                    let sizes: Vec<usize> = xs.iter().map(|v| self.val(*v).shape().c).collect();
                    for (v, part) in xs.iter().zip(split_channels(&g, &sizes)?) {
                        accumulate(&mut grads[v.0], part);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], map(&g, |v| -v));
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::MulMask { mask, x } => {
                    let (m, xv) = (self.val(*mask), self.val(*x));
                    let s = xv.shape();
                    let p = s.plane();
                    let mut gm = Tensor::zeros(m.shape());
                    let gx = fwd_mul_mask(m, &g)?;
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let base = (n * s.c + c) * p;
                            for i in 0..p {
                                gm.data_mut()[n * p + i] +=
                                    g.data()[base + i] * xv.data()[base + i];
                            }
                        }
                    }
                    accumulate(&mut grads[mask.0], gm);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Mse { pred, target } => {
                    let pv = self.val(*pred);
                    let scale = 2.0 * g.data()[0] as f64 / pv.len() as f64;
                    let gin = zip_map(pv, target, |p, t| ((p as f64 - t as f64) * scale) as f32);
                    accumulate(&mut grads[pred.0], gin);
                }
                Op::LogitBce { logits, target } => {
                    let lv = self.val(*logits);
                    let s = lv.shape();
                    let p = s.plane();
                    let scale = g.data()[0] as f64 / (s.n * p) as f64;
                    let mut gin = Tensor::zeros(s);
                    for n in 0..s.n {
                        let l = lv.channel_slice(n, 0, 2);
                        for i in 0..p {
                            let z = l[i] as f64 - l[p + i] as f64;
                            let sig = 1.0 / (1.0 + (-z).exp());
                            let d = ((sig - target.data()[n * p + i] as f64) * scale) as f32;
                            gin.data_mut()[(n * 2) * p + i] = d;
                            gin.data_mut()[(n * 2 + 1) * p + i] = -d;
                        }
                    }
                    accumulate(&mut grads[logits.0], gin);
                }
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        accumulate(
                            &mut grads[v.0],
                            Tensor::scalar((g.data()[0] as f64 * w) as f32),
                        );
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok((pgrads, NodeGrads { grads }))
    }
}

impl Graph for Tape<'_> {
    type Var = Var;

    fn params(&self) -> &ParamStore {
        self.params
    }

    fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }

    fn scalar(&self, v: &Var) -> f64 {
        let node = &self.nodes[v.0];
        node.scalar.unwrap_or_else(|| node.value.data()[0] as f64)
    }

    fn conv(&mut self, x: &Var, conv: Conv) -> Result<Var> {
        let out = conv_forward(
            self.val(*x),
            self.params.get(conv.weight),
            self.params.get(conv.bias),
            conv.dilation,
        )?;
        Ok(self.push(out, Op::Conv { x: *x, conv }))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let out = super::relu(self.val(*x));
        self.push(out, Op::Relu(*x))
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        let out = map(self.val(*x), sigmoid_f32);
        self.push(out, Op::Sigmoid(*x))
    }

    fn glow_prob(&mut self, logits: &Var) -> Result<Var> {
        let out = fwd_glow_prob(self.val(*logits))?;
        Ok(self.push(out, Op::GlowProb(*logits)))
    }

    fn harden(&mut self, x: &Var) -> Var {
        let out = fwd_harden(self.val(*x));
        self.push(out, Op::Harden)
    }

    fn concat(&mut self, xs: &[&Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = xs.iter().map(|v| self.val(**v)).collect();
        let out = concat_channels(&ts)?;
        Ok(self.push(out, Op::Concat(xs.iter().map(|v| **v).collect())))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("add", self.val(*a), self.val(*b))?;
        let out = zip_map(self.val(*a), self.val(*b), |x, y| x + y);
        Ok(self.push(out, Op::Add(*a, *b)))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("sub", self.val(*a), self.val(*b))?;
        let out = zip_map(self.val(*a), self.val(*b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(*a, *b)))
    }

    fn mul_mask(&mut self, mask: &Var, x: &Var) -> Result<Var> {
        let out = fwd_mul_mask(self.val(*mask), self.val(*x))?;
        Ok(self.push(out, Op::MulMask { mask: *mask, x: *x }))
    }

    fn mse(&mut self, pred: &Var, target: &Tensor) -> Result<Var> {
        let v = fwd_mse(self.val(*pred), target)?;
        Ok(self.push_scalar(
            v,
            Op::Mse {
                pred: *pred,
                target: target.clone(),
            },
        ))
    }

    fn logit_bce(&mut self, logits: &Var, target: &Tensor) -> Result<Var> {
        let v = fwd_logit_bce(self.val(*logits), target)?;
        Ok(self.push_scalar(
            v,
            Op::LogitBce {
                logits: *logits,
                target: target.clone(),
            },
        ))
    }

    fn weighted_sum(&mut self, terms: &[(&Var, f64)]) -> Result<Var> {
        let mut acc = 0.0;
        for (v, w) in terms {
            check_scalar(self.val(**v))?;
            acc += w * self.scalar(v);
        }
        Ok(self.push_scalar(
            acc,
            Op::WeightedSum(terms.iter().map(|(v, w)| (**v, *w)).collect()),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_net() -> (ParamStore, Conv, Conv) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let a = store.add_conv("a", 2, 3, 3, 2, 0.3, &mut rng);
        let b = store.add_conv("b", 3, 2, 1, 1, 0.3, &mut rng);
        (store, a, b)
    }

    fn run<G: Graph>(g: &mut G, a: Conv, b: Conv, x: Tensor) -> G::Var {
        let x = g.input(x);
        let h = g.conv(&x, a).unwrap();
        let h = g.relu(&h);
        let l = g.conv(&h, b).unwrap();
        g.glow_prob(&l).unwrap()
    }

    #[test]
    fn eval_and_tape_agree_bitwise() {
        let (store, a, b) = tiny_net();
        let x = Tensor::from_fn(Shape::new(2, 2, 5, 6), |n, c, y, x| {
            ((n + 2 * c + 3 * y + 5 * x) as f32 * 0.37).sin()
        });
        let mut e = Eval::new(&store);
        let ve = run(&mut e, a, b, x.clone());
        let mut t = Tape::new(&store);
        let vt = run(&mut t, a, b, x);
        assert_eq!(e.value(&ve), t.value(&vt));
    }

    #[test]
    fn bce_of_uniform_prediction_is_ln2() {
        let store = ParamStore::new();
        let mut e = Eval::new(&store);
        let logits = e.input(Tensor::zeros(Shape::new(1, 2, 3, 3)));
        let target = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, y, x| ((y + x) % 2) as f32);
        let l = e.logit_bce(&logits, &target).unwrap();
        assert!((e.scalar(&l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_non_binary_target() {
        let store = ParamStore::new();
        let mut e = Eval::new(&store);
        let logits = e.input(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        let target = Tensor::filled(Shape::new(1, 1, 2, 2), 0.5);
        assert!(matches!(e.logit_bce(&logits, &target), Err(Error::Data(_))));
    }

    #[test]
    fn backward_of_mse_is_scaled_residual() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let p =
            t.input(Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let target = Tensor::zeros(Shape::new(1, 1, 1, 4));
        let l = t.mse(&p, &target).unwrap();
        let total = t.weighted_sum(&[(&l, 3.0)]).unwrap();
        let (_, grads) = t.backward(total).unwrap();
        let g = grads.get(p).unwrap();
        for (i, &v) in g.data().iter().enumerate() {
            assert!((v - 3.0 * 2.0 * (i as f32 + 1.0) / 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let p = t.input(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(t.backward(p).is_err());
    }
}
