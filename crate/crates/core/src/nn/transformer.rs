use rand::Rng;

use super::attention::{Attention, AttnCache, AttnMode};
use super::layers::{LayerNorm, LnCache, Mlp, MlpCache};
use super::params::{join, ParamTree};
use super::tensor::{Real, Tensor};
use super::Segment;

const MLP_EXPANSION: usize = 4;

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    ln1: LnCache<T>,
    attn: AttnCache<T>,
    ln2: LnCache<T>,
    mlp: MlpCache<T>,
}

impl<T: Real> Block<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, n_heads: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(dim, n_heads, rng),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(&[dim, MLP_EXPANSION * dim, dim], rng),
        }
    }

    pub fn forward(&self, x: &[T], segs: &[Segment], mode: AttnMode) -> (Vec<T>, BlockCache<T>) {
        let rows = x.len() / self.ln1.gain.len();
        let (h1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&h1, segs, mode);
        let mid: Vec<T> = x.iter().zip(&a).map(|(&u, &v)| u + v).collect();
        let (h2, ln2) = self.ln2.forward(&mid);
        let (m, mlp) = self.mlp.forward(&h2, rows);
        let y = mid.iter().zip(&m).map(|(&u, &v)| u + v).collect();
        (y, BlockCache { ln1, attn, ln2, mlp })
    }

    pub fn backward(&self, cache: &BlockCache<T>, segs: &[Segment], dy: &[T], grad: &mut Block<T>) -> Vec<T> {
        let dh2 = self.mlp.backward(&cache.mlp, dy, &mut grad.mlp);
        let dmid_ln = self.ln2.backward(&cache.ln2, &dh2, &mut grad.ln2);
        let dmid: Vec<T> = dy.iter().zip(&dmid_ln).map(|(&a, &b)| a + b).collect();
        let dh1 = self.attn.backward(&cache.attn, segs, &dmid, &mut grad.attn);
        let dx_ln = self.ln1.backward(&cache.ln1, &dh1, &mut grad.ln1);
        dmid.iter().zip(&dx_ln).map(|(&a, &b)| a + b).collect()
    }
}

impl<T: Real> ParamTree<T> for Block<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.ln1.visit(&join(prefix, "ln1"), out);
        self.attn.visit(&join(prefix, "attn"), out);
        self.ln2.visit(&join(prefix, "ln2"), out);
        self.mlp.visit(&join(prefix, "mlp"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.ln1.visit_mut(out);
        self.attn.visit_mut(out);
        self.ln2.visit_mut(out);
        self.mlp.visit_mut(out);
    }
}

/// Blocks followed by a final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack<T> {
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
}

#[derive(Debug, Clone)]
pub struct StackCache<T> {
    blocks: Vec<BlockCache<T>>,
    norm: LnCache<T>,
}

impl<T: Real> Stack<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, n_heads: usize, n_layers: usize, rng: &mut R) -> Self {
        Self {
            blocks: (0..n_layers).map(|_| Block::new(dim, n_heads, rng)).collect(),
            norm: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, x: &[T], segs: &[Segment], mode: AttnMode) -> (Vec<T>, StackCache<T>) {
        let mut h = x.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h, segs, mode);
            caches.push(c);
            h = y;
        }
        let (y, norm) = self.norm.forward(&h);
        (y, StackCache { blocks: caches, norm })
    }

    pub fn backward(&self, cache: &StackCache<T>, segs: &[Segment], dy: &[T], grad: &mut Stack<T>) -> Vec<T> {
        let mut d = self.norm.backward(&cache.norm, dy, &mut grad.norm);
        for (i, b) in self.blocks.iter().enumerate().rev() {
            d = b.backward(&cache.blocks[i], segs, &d, &mut grad.blocks[i]);
        }
        d
    }
}

impl<T: Real> ParamTree<T> for Stack<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.blocks.visit(&join(prefix, "blocks"), out);
        self.norm.visit(&join(prefix, "norm"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.blocks.visit_mut(out);
        self.norm.visit_mut(out);
    }
}
