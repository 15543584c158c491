//! A forward-only executor that evaluates every operation in 64-bit floats
//! with direct loops. Used as the numeric reference of gradient checks.

use std::rc::Rc;

use super::graph::{
    check_binary_target, check_mask, check_scalar, check_two_channel, same_shape, softplus,
};
use super::{Conv, Graph, ParamId, ParamStore, Shape, Tensor};
use crate::error::{dim_err, Result};

#[derive(Debug)]
pub struct WideValue {
    data: Vec<f64>,
    shadow: Tensor,
    scalar: Option<f64>,
}

impl WideValue {
    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// 64-bit executor. Parameters are read from an `f32` store; one scalar
/// parameter may carry an extra `f64` offset. Records the sign of every
/// ReLU input so callers can tell whether two evaluations sit on the same
/// linear piece.
pub struct Wide<'p> {
    params: &'p ParamStore,
    offset: Option<(ParamId, usize, f64)>,
    relu_signs: Vec<bool>,
}

impl<'p> Wide<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            offset: None,
            relu_signs: Vec::new(),
        }
    }

    /// `x > 0` for every ReLU input evaluated so far, in evaluation order.
    pub fn relu_signs(&self) -> &[bool] {
        &self.relu_signs
    }

    /// Evaluates as if element `index` of parameter `id` were `value + delta`.
    pub fn with_offset(mut self, id: ParamId, index: usize, delta: f64) -> Self {
        self.offset = Some((id, index, delta));
        self
    }

    pub fn input_wide(&mut self, shape: Shape, data: Vec<f64>) -> Result<Rc<WideValue>> {
        if data.len() != shape.numel() {
            return Err(dim_err!("{} values for {shape}", data.len()));
        }
        Ok(Self::wrap(shape, data))
    }

    fn wrap(shape: Shape, data: Vec<f64>) -> Rc<WideValue> {
        let shadow = Tensor::from_vec(shape, data.iter().map(|&v| v as f32).collect())
            .expect("length checked by caller");
        Rc::new(WideValue {
            data,
            shadow,
            scalar: None,
        })
    }

    fn wrap_scalar(v: f64) -> Rc<WideValue> {
        Rc::new(WideValue {
            data: vec![v],
            shadow: Tensor::scalar(v as f32),
            scalar: Some(v),
        })
    }

    fn param(&self, id: ParamId) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .params
            .get(id)
            .data()
            .iter()
            .map(|&x| x as f64)
            .collect();
        if let Some((pid, i, d)) = self.offset {
            if pid == id {
                v[i] += d;
            }
        }
        v
    }

    fn zip(a: &WideValue, b: &WideValue, f: impl Fn(f64, f64) -> f64) -> Rc<WideValue> {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Self::wrap(a.shadow.shape(), data)
    }

    fn map(a: &WideValue, f: impl Fn(f64) -> f64) -> Rc<WideValue> {
        Self::wrap(a.shadow.shape(), a.data.iter().map(|&x| f(x)).collect())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph for Wide<'_> {
    type Var = Rc<WideValue>;

    fn params(&self) -> &ParamStore {
        self.params
    }

    fn input(&mut self, t: Tensor) -> Self::Var {
        let data = t.data().iter().map(|&v| v as f64).collect();
        Self::wrap(t.shape(), data)
    }

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor {
        &v.shadow
    }

    fn scalar(&self, v: &Self::Var) -> f64 {
        v.scalar.unwrap_or(v.data[0])
    }

    fn conv(&mut self, x: &Self::Var, conv: Conv) -> Result<Self::Var> {
        let ws = self.params.get(conv.weight).shape();
        let s = x.shadow.shape();
        if ws.c != s.c || ws.h != ws.w {
            return Err(dim_err!("conv weight {ws} against input {s}"));
        }
        let (w, b) = (self.param(conv.weight), self.param(conv.bias));
        let (k, d) = (ws.h as isize, conv.dilation as isize);
        let (h, wd) = (s.h as isize, s.w as isize);
        let os = s.with_channels(ws.n);
        let mut out = vec![0.0; os.numel()];
        for n in 0..s.n {
            for o in 0..ws.n {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[o];
                        for i in 0..s.c {
                            for ky in 0..k {
                                let sy = y + (ky - k / 2) * d;
                                if sy < 0 || sy >= h {
                                    continue;
                                }
                                for kx in 0..k {
                                    let sx = xx + (kx - k / 2) * d;
                                    if sx < 0 || sx >= wd {
                                        continue;
                                    }
                                    let wi = ((o * s.c + i) as isize * k + ky) * k + kx;
                                    let xi = ((n * s.c + i) as isize * h + sy) * wd + sx;
                                    acc += w[wi as usize] * x.data[xi as usize];
                                }
                            }
                        }
                        out[((n * ws.n + o) as isize * h * wd + y * wd + xx) as usize] = acc;
                    }
                }
            }
        }
        Ok(Self::wrap(os, out))
    }

    fn relu(&mut self, x: &Self::Var) -> Self::Var {
        self.relu_signs.extend(x.data.iter().map(|&v| v > 0.0));
        Self::map(x, |v| v.max(0.0))
    }

    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var {
        Self::map(x, sigmoid)
    }

    fn glow_prob(&mut self, logits: &Self::Var) -> Result<Self::Var> {
        check_two_channel(&logits.shadow)?;
        let s = logits.shadow.shape();
        let p = s.plane();
        let mut out = Vec::with_capacity(s.n * p);
        for n in 0..s.n {
            let l = &logits.data[n * 2 * p..(n + 1) * 2 * p];
            out.extend((0..p).map(|i| sigmoid(l[i] - l[p + i])));
        }
        Ok(Self::wrap(s.with_channels(1), out))
    }

    fn harden(&mut self, x: &Self::Var) -> Self::Var {
        Self::map(x, |v| if v > 0.5 { 1.0 } else { 0.0 })
    }

    fn concat(&mut self, xs: &[&Self::Var]) -> Result<Self::Var> {
        let first = xs
            .first()
            .ok_or_else(|| dim_err!("concat of nothing"))?
            .shadow
            .shape();
        let mut c = 0;
        for v in xs {
            let s = v.shadow.shape();
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(dim_err!("concat: {s} vs {first}"));
            }
            c += s.c;
        }
        let p = first.plane();
        let mut out = Vec::with_capacity(first.n * c * p);
        for n in 0..first.n {
            for v in xs {
                let vc = v.shadow.shape().c;
                out.extend_from_slice(&v.data[n * vc * p..(n + 1) * vc * p]);
            }
        }
        Ok(Self::wrap(first.with_channels(c), out))
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        same_shape("add", &a.shadow, &b.shadow)?;
        Ok(Self::zip(a, b, |x, y| x + y))
    }

    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        same_shape("sub", &a.shadow, &b.shadow)?;
        Ok(Self::zip(a, b, |x, y| x - y))
    }

    fn mul_mask(&mut self, mask: &Self::Var, x: &Self::Var) -> Result<Self::Var> {
        check_mask(&mask.shadow, &x.shadow)?;
        let s = x.shadow.shape();
        let p = s.plane();
        let data = (0..s.numel())
            .map(|i| {
                let n = i / (s.c * p);
                mask.data[n * p + i % p] * x.data[i]
            })
            .collect();
        Ok(Self::wrap(s, data))
    }

    fn mse(&mut self, pred: &Self::Var, target: &Tensor) -> Result<Self::Var> {
        same_shape("mse", &pred.shadow, target)?;
        let sum: f64 = pred
            .data
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t as f64).powi(2))
            .sum();
        Ok(Self::wrap_scalar(sum / pred.data.len() as f64))
    }

    fn logit_bce(&mut self, logits: &Self::Var, target: &Tensor) -> Result<Self::Var> {
        check_binary_target(&logits.shadow, target)?;
        let s = logits.shadow.shape();
        let p = s.plane();
        let mut sum = 0.0;
        for n in 0..s.n {
            let l = &logits.data[n * 2 * p..(n + 1) * 2 * p];
            let y = &target.data()[n * p..(n + 1) * p];
            for i in 0..p {
                let z = l[i] - l[p + i];
                sum += softplus(z) - y[i] as f64 * z;
            }
        }
        Ok(Self::wrap_scalar(sum / (s.n * p) as f64))
    }

    fn weighted_sum(&mut self, terms: &[(&Self::Var, f64)]) -> Result<Self::Var> {
        let mut acc = 0.0;
        for (v, w) in terms {
            check_scalar(&v.shadow)?;
            acc += w * self.scalar(v);
        }
        Ok(Self::wrap_scalar(acc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Eval;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn agrees_with_the_f32_executor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let c1 = store.add_conv("a", 3, 4, 3, 2, 0.3, &mut rng);
        let c2 = store.add_conv("b", 4, 2, 1, 1, 0.3, &mut rng);
        let x = Tensor::from_fn(Shape::new(2, 3, 7, 9), |_, _, _, _| {
            rng.random_range(-1.0..1.0)
        });
        let mask = Tensor::from_fn(Shape::new(2, 1, 7, 9), |_, _, _, _| {
            if rng.random_bool(0.5) {
                1.0
            } else {
                0.0
            }
        });
        fn run<G: Graph>(g: &mut G, x: &Tensor, mask: &Tensor, c1: Conv, c2: Conv) -> f64 {
            let v = g.input(x.clone());
            let a = g.conv(&v, c1).unwrap();
            let a = g.relu(&a);
            let l = g.conv(&a, c2).unwrap();
            let p = g.glow_prob(&l).unwrap();
            let s = g.sigmoid(&v);
            let m = g.mul_mask(&p, &s).unwrap();
            let y = g.concat(&[&m, &a]).unwrap();
            let t = Tensor::zeros(g.shape(&y));
            let e = g.mse(&y, &t).unwrap();
            let b = g.logit_bce(&l, mask).unwrap();
            let w = g.weighted_sum(&[(&e, 1.0), (&b, 0.5)]).unwrap();
            g.scalar(&w)
        }
        let narrow = run(&mut Eval::new(&store), &x, &mask, c1, c2);
        let wide = run(&mut Wide::new(&store), &x, &mask, c1, c2);
        assert!(
            (narrow - wide).abs() < 1e-5 * wide.abs(),
            "{narrow} vs {wide}"
        );
    }

    #[test]
    fn offset_moves_only_its_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let c = store.add_conv("a", 1, 1, 1, 1, 0.0, &mut rng);
        let x = Tensor::filled(Shape::new(1, 1, 2, 2), 2.0);
        let mut g = Wide::new(&store).with_offset(c.weight, 0, 0.25);
        let v = g.input(x);
        let y = g.conv(&v, c).unwrap();
        assert_eq!(y.data(), &[0.5; 4]);
    }

    #[test]
    fn records_relu_signs() {
        let store = ParamStore::new();
        let mut g = Wide::new(&store);
        let v = g
            .input_wide(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0])
            .unwrap();
        let y = g.relu(&v);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(g.relu_signs(), &[false, false, true]);
    }
}
