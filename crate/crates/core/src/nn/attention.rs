use rand::Rng;

use super::layers::Linear;
use super::params::{join, ParamTree};
use super::tensor::{gemm, MatMut, MatRef, Real, Tensor};
use super::Segment;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    Bidirectional,
    /// Row `i` attends to rows `j ≤ i` of its segment.
    Causal,
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub qkv: Linear<T>,
    pub out: Linear<T>,
    pub n_heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    x: Vec<T>,
    qkv: Vec<T>,
    /// Softmax probabilities, segment by segment then head by head.
    probs: Vec<T>,
    ctx: Vec<T>,
    rows: usize,
}

impl<T: Real> Attention<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, n_heads: usize, rng: &mut R) -> Self {
        assert!(dim % n_heads == 0, "hidden size must divide into heads");
        Self {
            qkv: Linear::new(dim, 3 * dim, rng),
            out: Linear::new(dim, dim, rng),
            n_heads,
        }
    }

    fn dim(&self) -> usize {
        self.out.fan_in()
    }

    pub fn forward(&self, x: &[T], segs: &[Segment], mode: AttnMode) -> (Vec<T>, AttnCache<T>) {
        let h = self.dim();
        let rows = x.len() / h;
        let dh = h / self.n_heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let qkv = self.qkv.forward(x, rows);
        let mut ctx = vec![T::zero(); rows * h];
        let total: usize = segs.iter().map(|s| s.len * s.len).sum::<usize>() * self.n_heads;
        let mut probs = vec![T::zero(); total];
        let mut p_off = 0;
        for seg in segs {
            let n = seg.len;
            for head in 0..self.n_heads {
                let q = seg.start * 3 * h + head * dh;
                let p = &mut probs[p_off..p_off + n * n];
                gemm(
                    scale,
                    MatRef::strided(&qkv, q, n, dh, 3 * h, 1),
                    MatRef::strided(&qkv, q + h, n, dh, 3 * h, 1).t(),
                    T::zero(),
                    MatMut::new(p, n, n),
                );
                softmax_rows(p, n, mode);
                gemm(
                    T::one(),
                    MatRef::new(p, n, n),
                    MatRef::strided(&qkv, q + 2 * h, n, dh, 3 * h, 1),
                    T::zero(),
                    MatMut::strided(&mut ctx, seg.start * h + head * dh, n, dh, h, 1),
                );
                p_off += n * n;
            }
        }
        let y = self.out.forward(&ctx, rows);
        (
            y,
            AttnCache {
                x: x.to_vec(),
                qkv,
                probs,
                ctx,
                rows,
            },
        )
    }

    pub fn backward(&self, cache: &AttnCache<T>, segs: &[Segment], dy: &[T], grad: &mut Attention<T>) -> Vec<T> {
        let h = self.dim();
        let rows = cache.rows;
        let dh = h / self.n_heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let dctx = self.out.backward(&cache.ctx, rows, dy, &mut grad.out);
        let mut dqkv = vec![T::zero(); rows * 3 * h];
        let mut p_off = 0;
        let max_n = segs.iter().map(|s| s.len).max().unwrap_or(0);
        let mut dp = vec![T::zero(); max_n * max_n];
        for seg in segs {
            let n = seg.len;
            for head in 0..self.n_heads {
                let q = seg.start * 3 * h + head * dh;
                let c = seg.start * h + head * dh;
                let p = &cache.probs[p_off..p_off + n * n];
                let dp = &mut dp[..n * n];
                gemm(
                    T::one(),
                    MatRef::strided(&dctx, c, n, dh, h, 1),
                    MatRef::strided(&cache.qkv, q + 2 * h, n, dh, 3 * h, 1).t(),
                    T::zero(),
                    MatMut::new(dp, n, n),
                );
                gemm(
                    T::one(),
                    MatRef::new(p, n, n).t(),
                    MatRef::strided(&dctx, c, n, dh, h, 1),
                    T::zero(),
                    MatMut::strided(&mut dqkv, q + 2 * h, n, dh, 3 * h, 1),
                );
                // dS = P ⊙ (dP − rowsum(P ⊙ dP)), folded with the score scale.
                for i in 0..n {
                    let pr = &p[i * n..(i + 1) * n];
                    let dr = &mut dp[i * n..(i + 1) * n];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                gemm(
                    T::one(),
                    MatRef::new(dp, n, n),
                    MatRef::strided(&cache.qkv, q + h, n, dh, 3 * h, 1),
                    T::zero(),
                    MatMut::strided(&mut dqkv, q, n, dh, 3 * h, 1),
                );
                gemm(
                    T::one(),
                    MatRef::new(dp, n, n).t(),
                    MatRef::strided(&cache.qkv, q, n, dh, 3 * h, 1),
                    T::zero(),
                    MatMut::strided(&mut dqkv, q + h, n, dh, 3 * h, 1),
                );
                p_off += n * n;
            }
        }
        self.qkv.backward(&cache.x, rows, &dqkv, &mut grad.qkv)
    }
}

fn softmax_rows<T: Real>(p: &mut [T], n: usize, mode: AttnMode) {
    for i in 0..n {
        let row = &mut p[i * n..(i + 1) * n];
        let allowed = match mode {
            AttnMode::Bidirectional => n,
            AttnMode::Causal => i + 1,
        };
        let max = row[..allowed].iter().copied().fold(T::neg_infinity(), T::max);
        for v in &mut row[..allowed] {
            *v = (*v - max).exp_fast();
        }
        let inv = T::one() / row[..allowed].iter().copied().sum::<T>();
        for v in &mut row[..allowed] {
            *v *= inv;
        }
        for v in &mut row[allowed..] {
            *v = T::zero();
        }
    }
}

impl<T: Real> ParamTree<T> for Attention<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.qkv.visit(&join(prefix, "qkv"), out);
        self.out.visit(&join(prefix, "out"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.qkv.visit_mut(out);
        self.out.visit_mut(out);
    }
}
