use rand::Rng;

use super::params::{join, ParamTree};
use super::tensor::{gemm, MatMut, MatRef, Real, Tensor};
use crate::rng::truncated_normal;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Affine map `y = x·W + b` with `W` stored `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::from_fn(&[fan_in, fan_out], || T::of(truncated_normal(rng, INIT_STD))),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let (fi, fo) = (self.fan_in(), self.fan_out());
        assert_eq!(x.len(), rows * fi, "linear input shape");
        let mut y = vec![T::zero(); rows * fo];
        for row in y.chunks_exact_mut(fo) {
            row.copy_from_slice(&self.bias.data);
        }
        gemm(
            T::one(),
            MatRef::new(x, rows, fi),
            MatRef::new(&self.weight.data, fi, fo),
            T::one(),
            MatMut::new(&mut y, rows, fo),
        );
        y
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    pub fn backward(&self, x: &[T], rows: usize, dy: &[T], grad: &mut Linear<T>) -> Vec<T> {
        self.backward_params(x, rows, dy, grad);
        self.backward_input(dy, rows)
    }

    pub fn backward_params(&self, x: &[T], rows: usize, dy: &[T], grad: &mut Linear<T>) {
        let (fi, fo) = (self.fan_in(), self.fan_out());
        gemm(
            T::one(),
            MatRef::new(x, rows, fi).t(),
            MatRef::new(dy, rows, fo),
            T::one(),
            MatMut::new(&mut grad.weight.data, fi, fo),
        );
        for row in dy.chunks_exact(fo) {
            for (g, &d) in grad.bias.data.iter_mut().zip(row) {
                *g += d;
            }
        }
    }

    pub fn backward_input(&self, dy: &[T], rows: usize) -> Vec<T> {
        let (fi, fo) = (self.fan_in(), self.fan_out());
        let mut dx = vec![T::zero(); rows * fi];
        gemm(
            T::one(),
            MatRef::new(dy, rows, fo),
            MatRef::new(&self.weight.data, fi, fo).t(),
            T::zero(),
            MatMut::new(&mut dx, rows, fi),
        );
        dx
    }
}

impl<T: Real> ParamTree<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Tensor::from_fn(&[dim], T::one),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, LnCache<T>) {
        let d = self.gain.len();
        let rows = x.len() / d;
        let inv_d = T::one() / T::of(d as f64);
        let eps = T::of(LN_EPS);
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for ((xr, yr), hr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)).zip(xhat.chunks_exact_mut(d)) {
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for i in 0..d {
                hr[i] = (xr[i] - mean) * r;
                yr[i] = hr[i] * self.gain.data[i] + self.bias.data[i];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LnCache<T>, dy: &[T], grad: &mut LayerNorm<T>) -> Vec<T> {
        let d = self.gain.len();
        let inv_d = T::one() / T::of(d as f64);
        let mut dx = vec![T::zero(); dy.len()];
        let mut dxhat = vec![T::zero(); d];
        for (r, ((dyr, hr), dxr)) in dy
            .chunks_exact(d)
            .zip(cache.xhat.chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
            .enumerate()
        {
            let mut mean_d = T::zero();
            let mut mean_dh = T::zero();
            for i in 0..d {
                grad.gain.data[i] += dyr[i] * hr[i];
                grad.bias.data[i] += dyr[i];
                dxhat[i] = dyr[i] * self.gain.data[i];
                mean_d += dxhat[i];
                mean_dh += dxhat[i] * hr[i];
            }
            mean_d *= inv_d;
            mean_dh *= inv_d;
            let rs = cache.rstd[r];
            for i in 0..d {
                dxr[i] = rs * (dxhat[i] - mean_d - hr[i] * mean_dh);
            }
        }
        dx
    }
}

impl<T: Real> ParamTree<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "gain"), &self.gain));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.gain);
        out.push(&mut self.bias);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: &[T]) -> Vec<T> {
    gelu_with_tanh(x).0
}

/// GELU output together with the inner tanh values, which the backward
/// pass reuses.
pub fn gelu_with_tanh<T: Real>(x: &[T]) -> (Vec<T>, Vec<T>) {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let t: Vec<T> = x.iter().map(|&v| (c * (v + a * v * v * v)).tanh_fast()).collect();
    let y = x.iter().zip(&t).map(|(&v, &t)| half * v * (T::one() + t)).collect();
    (y, t)
}

pub fn gelu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    gelu_backward_with_tanh(x, &gelu_with_tanh(x).1, dy)
}

pub fn gelu_backward_with_tanh<T: Real>(x: &[T], tanh: &[T], dy: &[T]) -> Vec<T> {
    let (c, a, half, three) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5), T::of(3.0));
    x.iter()
        .zip(tanh)
        .zip(dy)
        .map(|((&v, &t), &d)| {
            let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
            d * (half * (T::one() + t) + half * v * dt)
        })
        .collect()
}

/// Stack of affine layers with GELU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    /// Input to each layer.
    inputs: Vec<Vec<T>>,
    /// Pre-activation outputs of every hidden layer.
    pre: Vec<Vec<T>>,
    tanh: Vec<Vec<T>>,
    rows: usize,
}

impl<T: Real> Mlp<T> {
    /// `dims = [in, hidden…, out]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Self {
            layers: dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    pub fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, MlpCache<T>) {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len() - 1),
            tanh: Vec::with_capacity(self.layers.len() - 1),
            rows,
        };
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h, rows);
            cache.inputs.push(h);
            if i + 1 < self.layers.len() {
                let (g, t) = gelu_with_tanh(&z);
                h = g;
                cache.pre.push(z);
                cache.tanh.push(t);
            } else {
                h = z;
            }
        }
        (h, cache)
    }

    pub fn infer(&self, x: &[T], rows: usize) -> Vec<T> {
        self.forward(x, rows).0
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: &[T], grad: &mut Mlp<T>) -> Vec<T> {
        let rows = cache.rows;
        let mut d = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                d = gelu_backward_with_tanh(&cache.pre[i], &cache.tanh[i], &d);
            }
            d = self.layers[i].backward(&cache.inputs[i], rows, &d, &mut grad.layers[i]);
        }
        d
    }
}

impl<T: Real> ParamTree<T> for Mlp<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.layers.visit(prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.layers.visit_mut(out);
    }
}
