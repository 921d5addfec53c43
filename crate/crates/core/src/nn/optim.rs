use super::params::{ParamTree, ParamsExt};
use super::tensor::Real;

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<P: ParamTree<T>>(params: &P, lr: f64, betas: (f64, f64)) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            lr: T::of(lr),
            beta1: T::of(betas.0),
            beta2: T::of(betas.1),
            eps: T::of(1e-8),
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step<P: ParamTree<T>>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        let grads = grads.tensors();
        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k].data);
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the pre-clipping norm and whether clipping happened.
pub fn clip_global_norm<T: Real, P: ParamTree<T>>(grads: &mut P, max_norm: f64) -> (f64, bool) {
    let norm = grads.global_norm().f64();
    if norm > max_norm {
        grads.scale_(T::of(max_norm / norm));
        (norm, true)
    } else {
        (norm, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = vec![Tensor::<f64> { shape: vec![2], data: vec![3.0, -2.0] }];
        let mut opt = Adam::new(&p, 0.1, (0.9, 0.999));
        for _ in 0..500 {
            let g = vec![Tensor { shape: vec![2], data: p[0].data.iter().map(|x| 2.0 * x).collect() }];
            opt.step(&mut p, &g);
        }
        assert!(p[0].data.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = vec![Tensor::<f32> { shape: vec![2], data: vec![1.0, 2.0] }];
        let before = p.clone();
        let mut opt = Adam::new(&p, 0.0, (0.9, 0.999));
        let g = vec![Tensor { shape: vec![2], data: vec![5.0, -5.0] }];
        opt.step(&mut p, &g);
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::<f64> { shape: vec![2], data: vec![3.0, 4.0] }];
        assert_eq!(clip_global_norm(&mut g, 1.0), (5.0, true));
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert!(!clip_global_norm(&mut g, 2.0).1);
    }
}
