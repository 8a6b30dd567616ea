//! Parameter containers shared by the model components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Binder, Var};
use crate::error::{dim_err, Result};
use crate::tensor::{Element, Tensor};

/// Named traversal over parameter tensors in a fixed order.
pub trait Module<E: Element> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<E>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<E: Element, M: Module<E>> Module<E> for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<E>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Seeded weight initializer: zero-mean uniform in `±1/sqrt(fan_in)`.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform<E: Element>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<E> {
        Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), &mut self.rng)
    }
}

/// Affine map `y = x W + b` over the last axis, `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<E: Element> {
    pub w: Tensor<E>,
    pub b: Tensor<E>,
}

impl<E: Element> Linear<E> {
    pub fn new(input: usize, output: usize, init: &mut Init) -> Self {
        Linear { w: init.uniform(&[input, output], input), b: Tensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, x: &Var<E>, binder: &Binder<E>) -> Result<Var<E>> {
        if x.shape().last() != Some(&self.input_dim()) {
            return Err(dim_err!("linear {}->{} applied to {:?}", self.input_dim(), self.output_dim(), x.shape()));
        }
        x.matmul(&binder.bind(&self.w))?.add_bias(&binder.bind(&self.b))
    }
}

impl<E: Element> Module<E> for Linear<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<E>)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// Layer normalization over the last axis with learnable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

impl<E: Element> LayerNorm<E> {
    pub const EPS: f64 = 1e-6;

    pub fn new(width: usize) -> Self {
        LayerNorm { gamma: Tensor::full(&[width], E::one()), beta: Tensor::zeros(&[width]) }
    }

    pub fn forward(&self, x: &Var<E>, binder: &Binder<E>) -> Result<Var<E>> {
        x.layer_norm_last(&binder.bind(&self.gamma), &binder.bind(&self.beta), E::lit(Self::EPS))
    }
}

impl<E: Element> Module<E> for LayerNorm<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<E>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_counts_and_names() {
        let lin = Linear::<f32>::new(3, 5, &mut Init::new(0));
        assert_eq!(lin.param_count(), 20);
        let mut names = Vec::new();
        vec![lin.clone(), lin].visit("proj", &mut |n, _| names.push(n.to_string()));
        assert_eq!(names, ["proj.0.w", "proj.0.b", "proj.1.w", "proj.1.b"]);
    }

    #[test]
    fn init_bounds_and_seed() {
        let a: Tensor<f64> = Init::new(4).uniform(&[64, 8], 64);
        let b: Tensor<f64> = Init::new(4).uniform(&[64, 8], 64);
        assert_eq!(a, b);
        assert!(a.max_abs() <= 0.125);
        assert!(a.max_abs() > 0.1);
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let lin = Linear::<f64>::new(3, 2, &mut Init::new(0));
        let x = Var::constant(Tensor::zeros(&[4, 2]));
        assert!(lin.forward(&x, &Binder::inference()).is_err());
    }
}
