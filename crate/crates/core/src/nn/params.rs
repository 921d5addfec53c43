use super::tensor::{Real, Tensor};

/// Enumerates a model's tensors in a fixed order. Gradients, optimiser
/// moments and checkpoints all rely on this order.
pub trait ParamTree<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real> ParamTree<T> for Tensor<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((prefix.to_string(), self));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(self);
    }
}

impl<T: Real, P: ParamTree<T>> ParamTree<T> for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        for p in self.iter_mut() {
            p.visit_mut(out);
        }
    }
}

/// Whole-tree helpers available on every [`ParamTree`].
pub trait ParamsExt<T: Real>: ParamTree<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.visit_mut(&mut out);
        out
    }

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zero_(&mut self) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.zero_();
        z
    }

    fn flat(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    fn flat_get(&self, mut index: usize) -> T {
        for t in self.tensors() {
            if index < t.len() {
                return t.data[index];
            }
            index -= t.len();
        }
        panic!("flat index out of range");
    }

    fn flat_set(&mut self, mut index: usize, value: T) {
        for t in self.tensors_mut() {
            if index < t.len() {
                t.data[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("flat index out of range");
    }

    fn global_norm(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    fn scale_(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// `self += other`, tensor by tensor.
    fn add_(&mut self, other: &Self) {
        let src = other.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, &s) in dst.data.iter_mut().zip(&src.data) {
                *d += s;
            }
        }
    }

    /// Polyak averaging: `self ← τ·source + (1 − τ)·self`.
    fn soft_update_(&mut self, source: &Self, tau: T) {
        let src = source.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, &s) in dst.data.iter_mut().zip(&src.data) {
                *d = tau * s + (T::one() - tau) * *d;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

impl<T: Real, P: ParamTree<T> + ?Sized> ParamsExt<T> for P {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polyak_with_unit_rate_copies() {
        let mut a = vec![Tensor::<f32>::zeros(&[2]), Tensor::zeros(&[3])];
        let b = vec![
            Tensor { shape: vec![2], data: vec![1.0, 2.0] },
            Tensor { shape: vec![3], data: vec![3.0, 4.0, 5.0] },
        ];
        a.soft_update_(&b, 1.0);
        assert_eq!(a, b);
        assert_eq!(a.named()[1].0, "1");
        assert_eq!(a.flat_get(4), 5.0);
    }
}
