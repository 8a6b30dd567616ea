//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Var`] wraps a [`Tensor`] value. Operations on vars that require
//! gradients record a backward closure and keep their parents alive; when no
//! input requires gradients the result is a plain constant and intermediate
//! values are released as soon as they go out of scope, so inference runs
//! through the same code with no tape overhead.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::conv::{dwconv3d_causal, dwconv3d_causal_backward};
use crate::tensor::{gemm, Element, MatLayout, Tensor};

type BackwardFn<E> = Box<dyn FnOnce(&Tensor<E>) -> Result<Vec<Option<Tensor<E>>>>>;

struct Node<E: Element> {
    value: Tensor<E>,
    requires_grad: bool,
    parents: Vec<Var<E>>,
    backward: RefCell<Option<BackwardFn<E>>>,
    grad: RefCell<Option<Tensor<E>>>,
    backward_done: Cell<bool>,
}

/// A node of the autodiff graph.
#[derive(Clone)]
pub struct Var<E: Element>(Rc<Node<E>>);

impl<E: Element> std::fmt::Debug for Var<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, grad={})", self.0.value, self.0.requires_grad)
    }
}

fn sgn<E: Element>(v: E) -> E {
    if v > E::zero() {
        E::one()
    } else if v < E::zero() {
        -E::one()
    } else {
        E::zero()
    }
}

fn count<E: Element>(n: usize) -> E {
    E::from_usize(n).expect("count converts")
}

fn gelu_parts<E: Element>(x: E) -> (E, E) {
    let c = E::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = E::lit(0.044715);
    let half = E::lit(0.5);
    let three = E::lit(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (E::one() + th);
    let dy = half * (E::one() + th) + half * x * (E::one() - th * th) * c * (E::one() + three * a * x * x);
    (y, dy)
}

/// Tanh-approximated GELU on a plain tensor.
pub fn gelu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| gelu_parts(v).0)
}

pub(crate) fn softplus_scalar<E: Element>(v: E) -> E {
    // max(v, 0) + ln(1 + e^{-|v|}) stays finite for large |v|
    v.max(E::zero()) + (-v.abs()).exp().ln_1p()
}

fn sigmoid<E: Element>(v: E) -> E {
    E::one() / (E::one() + (-v).exp())
}

/// Soft-shrinkage `sgn(x) * max(|x| - theta, 0)`.
pub fn soft<E: Element>(x: &Tensor<E>, theta: E) -> Result<Tensor<E>> {
    if !(theta >= E::zero()) {
        return Err(Error::Parameter(format!("soft threshold must be >= 0, got {:?}", theta)));
    }
    Ok(x.map(|v| sgn(v) * (v.abs() - theta).max(E::zero())))
}

impl<E: Element> Var<E> {
    fn build(value: Tensor<E>, requires_grad: bool, parents: Vec<Var<E>>, backward: Option<BackwardFn<E>>) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad,
            parents,
            backward: RefCell::new(backward),
            grad: RefCell::new(None),
            backward_done: Cell::new(false),
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor<E>) -> Self {
        Self::build(value, false, Vec::new(), None)
    }

    /// A leaf whose gradient is populated by [`Var::backward`].
    pub fn param(value: Tensor<E>) -> Self {
        Self::build(value, true, Vec::new(), None)
    }

    fn from_op(
        value: Tensor<E>,
        parents: Vec<Var<E>>,
        backward: impl FnOnce(&Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> + 'static,
    ) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Self::build(value, true, parents, Some(Box::new(backward)))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor<E> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient (leaves only; intermediates are freed).
    pub fn grad(&self) -> Option<Tensor<E>> {
        self.0.grad.borrow().clone()
    }

    fn accumulate(&self, g: Tensor<E>) -> Result<()> {
        let mut slot = self.0.grad.borrow_mut();
        *slot = Some(match slot.take() {
            Some(prev) => prev.add(&g)?,
            None => g,
        });
        Ok(())
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Back-propagates from this scalar, filling `grad()` on every reachable
    /// leaf that requires gradients. Each graph can be consumed once.
    pub fn backward(&self) -> Result<()> {
        if self.value().numel() != 1 {
            return Err(Error::Graph(format!("backward needs a scalar root, got {:?}", self.shape())));
        }
        if self.0.backward_done.replace(true) {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        // Post-order DFS: parents precede children in `order`.
        let mut order: Vec<Var<E>> = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Var<E>, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(v.key()) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in v.0.parents.iter().filter(|p| p.requires_grad()) {
                if !seen.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        self.accumulate(Tensor::full(self.shape(), E::one()))?;
        for v in order.iter().rev() {
            if v.0.parents.is_empty() {
                continue;
            }
            let Some(g) = v.0.grad.borrow_mut().take() else { continue };
            let f = v.0.backward.borrow_mut().take().ok_or_else(|| {
                Error::Graph("graph node reached twice by backward; rebuild the graph".into())
            })?;
            let grads = f(&g)?;
            for (p, gp) in v.0.parents.iter().zip(grads) {
                if let (true, Some(gp)) = (p.requires_grad(), gp) {
                    if gp.shape() != p.shape() {
                        return Err(dim_err!("gradient {:?} for value {:?}", gp.shape(), p.shape()));
                    }
                    p.accumulate(gp)?;
                }
            }
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, other: &Var<E>) -> Result<Var<E>> {
        let out = self.value().add(other.value())?;
        Ok(Self::from_op(out, vec![self.clone(), other.clone()], |g| {
            Ok(vec![Some(g.clone()), Some(g.clone())])
        }))
    }

    pub fn sub(&self, other: &Var<E>) -> Result<Var<E>> {
        let out = self.value().sub(other.value())?;
        Ok(Self::from_op(out, vec![self.clone(), other.clone()], |g| {
            Ok(vec![Some(g.clone()), Some(g.scale(-E::one()))])
        }))
    }

    pub fn mul(&self, other: &Var<E>) -> Result<Var<E>> {
        let (a, b) = (self.value().clone(), other.value().clone());
        let out = a.mul(&b)?;
        Ok(Self::from_op(out, vec![self.clone(), other.clone()], move |g| {
            Ok(vec![Some(g.mul(&b)?), Some(g.mul(&a)?)])
        }))
    }

    pub fn scale(&self, c: E) -> Var<E> {
        Self::from_op(self.value().scale(c), vec![self.clone()], move |g| Ok(vec![Some(g.scale(c))]))
    }

    pub fn add_scalar(&self, c: E) -> Var<E> {
        Self::from_op(self.value().map(|v| v + c), vec![self.clone()], |g| Ok(vec![Some(g.clone())]))
    }

    /// Multiplies every element by a one-element var.
    pub fn mul_scalar(&self, s: &Var<E>) -> Result<Var<E>> {
        if s.value().numel() != 1 {
            return Err(dim_err!("mul_scalar needs a 1-element factor, got {:?}", s.shape()));
        }
        let x = self.value().clone();
        let sv = s.value().item();
        let s_shape = s.shape().to_vec();
        Ok(Self::from_op(x.scale(sv), vec![self.clone(), s.clone()], move |g| {
            let gs: E = g.data().iter().zip(x.data()).map(|(&a, &b)| a * b).sum();
            Ok(vec![Some(g.scale(sv)), Some(Tensor::new(&s_shape, vec![gs])?)])
        }))
    }

    pub fn square(&self) -> Var<E> {
        let x = self.value().clone();
        Self::from_op(x.map(|v| v * v), vec![self.clone()], move |g| {
            Ok(vec![Some(g.zip_map(&x, |gv, xv| gv * (xv + xv))?)])
        })
    }

    pub fn exp(&self) -> Var<E> {
        let y = self.value().map(|v| v.exp());
        let yc = y.clone();
        Self::from_op(y, vec![self.clone()], move |g| Ok(vec![Some(g.mul(&yc)?)]))
    }

    pub fn gelu(&self) -> Var<E> {
        let x = self.value().clone();
        Self::from_op(gelu(&x), vec![self.clone()], move |g| {
            Ok(vec![Some(g.zip_map(&x, |gv, xv| gv * gelu_parts(xv).1)?)])
        })
    }

    pub fn softplus(&self) -> Var<E> {
        let x = self.value().clone();
        Self::from_op(x.map(softplus_scalar), vec![self.clone()], move |g| {
            Ok(vec![Some(g.zip_map(&x, |gv, xv| gv * sigmoid(xv))?)])
        })
    }

    /// Soft-shrinkage with a learnable one-element threshold `theta >= 0`.
    pub fn soft_threshold(&self, theta: &Var<E>) -> Result<Var<E>> {
        if theta.value().numel() != 1 {
            return Err(dim_err!("soft threshold must have 1 element, got {:?}", theta.shape()));
        }
        let th = theta.value().item();
        let x = self.value().clone();
        let out = soft(&x, th)?;
        let t_shape = theta.shape().to_vec();
        Ok(Self::from_op(out, vec![self.clone(), theta.clone()], move |g| {
            let gx = g.zip_map(&x, |gv, xv| if xv.abs() > th { gv } else { E::zero() })?;
            let gt: E = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| if xv.abs() > th { -gv * sgn(xv) } else { E::zero() })
                .sum();
            Ok(vec![Some(gx), Some(Tensor::new(&t_shape, vec![gt])?)])
        }))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&self) -> Var<E> {
        let shape = self.shape().to_vec();
        Self::from_op(Tensor::scalar(self.value().sum()), vec![self.clone()], move |g| {
            Ok(vec![Some(Tensor::full(&shape, g.item()))])
        })
    }

    pub fn mean(&self) -> Var<E> {
        let n = self.value().numel().max(1);
        self.sum().scale(E::one() / count(n))
    }

    /// `mean(|self - target|)` against a constant target.
    pub fn l1_mean(&self, target: &Tensor<E>) -> Result<Var<E>> {
        let diff = self.value().sub(target)?;
        let n = diff.numel().max(1);
        let v = diff.data().iter().map(|d| d.abs()).sum::<E>() / count(n);
        Ok(Self::from_op(Tensor::scalar(v), vec![self.clone()], move |g| {
            let s = g.item() / count(n);
            Ok(vec![Some(diff.map(|d| sgn(d) * s))])
        }))
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<E>> {
        let orig = self.shape().to_vec();
        let out = self.value().reshape(shape)?;
        Ok(Self::from_op(out, vec![self.clone()], move |g| Ok(vec![Some(g.reshape(&orig)?)])))
    }

    pub fn slice_last(&self, start: usize, len: usize) -> Result<Var<E>> {
        let full = self.last_dim();
        let out = self.value().slice_last(start, len)?;
        Ok(Self::from_op(out, vec![self.clone()], move |g| {
            let mut lead = g.shape().to_vec();
            let mut data = Vec::with_capacity(g.rows() * full);
            for row in g.data().chunks_exact(len.max(1)) {
                data.extend(std::iter::repeat(E::zero()).take(start));
                data.extend_from_slice(row);
                data.extend(std::iter::repeat(E::zero()).take(full - start - len));
            }
            *lead.last_mut().expect("rank >= 1") = full;
            Ok(vec![Some(Tensor::new(&lead, data)?)])
        }))
    }

    pub fn concat_last(parts: &[&Var<E>]) -> Result<Var<E>> {
        let values: Vec<&Tensor<E>> = parts.iter().map(|p| p.value()).collect();
        let out = Tensor::concat_last(&values)?;
        let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
        Ok(Self::from_op(out, parts.iter().map(|&p| p.clone()).collect(), move |g| {
            let mut start = 0;
            widths
                .iter()
                .map(|&w| {
                    let s = g.slice_last(start, w);
                    start += w;
                    s.map(Some)
                })
                .collect()
        }))
    }

    pub fn slice_axis0(&self, start: usize, len: usize) -> Result<Var<E>> {
        let full = self.shape().to_vec();
        let out = self.value().slice_axis0(start, len)?;
        Ok(Self::from_op(out, vec![self.clone()], move |g| {
            let inner: usize = full[1..].iter().product();
            let mut data = vec![E::zero(); full.iter().product()];
            data[start * inner..(start + len) * inner].copy_from_slice(g.data());
            Ok(vec![Some(Tensor::new(&full, data)?)])
        }))
    }

    pub fn concat_axis0(parts: &[&Var<E>]) -> Result<Var<E>> {
        let values: Vec<&Tensor<E>> = parts.iter().map(|p| p.value()).collect();
        let out = Tensor::concat_axis0(&values)?;
        let leads: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        Ok(Self::from_op(out, parts.iter().map(|&p| p.clone()).collect(), move |g| {
            let mut start = 0;
            leads
                .iter()
                .map(|&l| {
                    let s = g.slice_axis0(start, l);
                    start += l;
                    s.map(Some)
                })
                .collect()
        }))
    }

    fn last_dim(&self) -> usize {
        self.value().last_dim()
    }

    // ---- linear algebra ----------------------------------------------

    /// `out[..., b] = sum_a x[..., a] * w[a, b]`.
    pub fn matmul(&self, w: &Var<E>) -> Result<Var<E>> {
        let (x, wv) = (self.value().clone(), w.value().clone());
        let out = x.matmul_lastdim(&wv)?;
        Ok(Self::from_op(out, vec![self.clone(), w.clone()], move |g| {
            let (m, a, b) = (x.rows(), wv.shape()[0], wv.shape()[1]);
            let gx = g.matmul_lastdim_t(&wv)?;
            let mut gw = vec![E::zero(); a * b];
            gemm(x.data(), MatLayout::row_major(m, a).transposed(), g.data(), MatLayout::row_major(m, b), &mut gw, E::zero());
            Ok(vec![Some(gx), Some(Tensor::new(&[a, b], gw)?)])
        }))
    }

    /// `out[..., b] = sum_a x[..., a] * w[b, a]` (multiplication by `w^T`).
    pub fn matmul_t(&self, w: &Var<E>) -> Result<Var<E>> {
        let (x, wv) = (self.value().clone(), w.value().clone());
        let out = x.matmul_lastdim_t(&wv)?;
        Ok(Self::from_op(out, vec![self.clone(), w.clone()], move |g| {
            let (m, b, a) = (x.rows(), wv.shape()[0], wv.shape()[1]);
            let gx = g.matmul_lastdim(&wv)?;
            let mut gw = vec![E::zero(); b * a];
            gemm(g.data(), MatLayout::row_major(m, b).transposed(), x.data(), MatLayout::row_major(m, a), &mut gw, E::zero());
            Ok(vec![Some(gx), Some(Tensor::new(&[b, a], gw)?)])
        }))
    }

    /// Broadcast add of a `[C]` bias over a `[..., C]` value.
    pub fn add_bias(&self, b: &Var<E>) -> Result<Var<E>> {
        let out = self.value().add_bias(b.value())?;
        let c = b.value().numel();
        Ok(Self::from_op(out, vec![self.clone(), b.clone()], move |g| {
            let mut gb = vec![E::zero(); c];
            for row in g.data().chunks_exact(c) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            Ok(vec![Some(g.clone()), Some(Tensor::new(&[c], gb)?)])
        }))
    }

    /// Causal depthwise 3x3x3 convolution; the cache is a constant.
    pub fn dwconv3d_causal(&self, kernel: &Var<E>, bias: &Var<E>, cache: Option<&Tensor<E>>) -> Result<Var<E>> {
        let x = self.value().clone();
        let k = kernel.value().clone();
        let cache = cache.cloned();
        let out = dwconv3d_causal(&x, &k, bias.value(), cache.as_ref())?;
        Ok(Self::from_op(out, vec![self.clone(), kernel.clone(), bias.clone()], move |g| {
            let (gx, gk, gb) = dwconv3d_causal_backward(&x, &k, cache.as_ref(), g)?;
            Ok(vec![Some(gx), Some(gk), Some(gb)])
        }))
    }

    /// Per-row layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm_last(&self, gamma: &Var<E>, beta: &Var<E>, eps: E) -> Result<Var<E>> {
        let c = self.last_dim();
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(dim_err!("layer norm affine {:?}/{:?} for width {}", gamma.shape(), beta.shape(), c));
        }
        let x = self.value();
        let rows = x.rows();
        let mut xhat = vec![E::zero(); x.numel()];
        let mut inv_std = vec![E::zero(); rows];
        for (r, (src, dst)) in x.data().chunks_exact(c).zip(xhat.chunks_exact_mut(c)).enumerate() {
            let mu = src.iter().copied().sum::<E>() / count(c);
            let var = src.iter().map(|&v| (v - mu) * (v - mu)).sum::<E>() / count(c);
            let is = E::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mu) * is;
            }
        }
        let xhat = Tensor::new(x.shape(), xhat)?;
        let gv = gamma.value().clone();
        let out = xhat.mul(&Tensor::concat_axis0(&vec![&gv; rows])?.reshape(x.shape())?)?.add_bias(beta.value())?;
        Ok(Self::from_op(out, vec![self.clone(), gamma.clone(), beta.clone()], move |g| {
            let mut gx = vec![E::zero(); xhat.numel()];
            let mut gg = vec![E::zero(); c];
            let mut gb = vec![E::zero(); c];
            for r in 0..rows {
                let gr = &g.data()[r * c..(r + 1) * c];
                let xr = &xhat.data()[r * c..(r + 1) * c];
                let mut m1 = E::zero();
                let mut m2 = E::zero();
                for i in 0..c {
                    gg[i] += gr[i] * xr[i];
                    gb[i] += gr[i];
                    let gh = gr[i] * gv.data()[i];
                    m1 += gh;
                    m2 += gh * xr[i];
                }
                m1 /= count(c);
                m2 /= count(c);
                for i in 0..c {
                    let gh = gr[i] * gv.data()[i];
                    gx[r * c + i] = inv_std[r] * (gh - m1 - xr[i] * m2);
                }
            }
            Ok(vec![
                Some(Tensor::new(xhat.shape(), gx)?),
                Some(Tensor::new(&[c], gg)?),
                Some(Tensor::new(&[c], gb)?),
            ])
        }))
    }

    /// A fixed linear map of several inputs with a caller-supplied adjoint.
    ///
    /// `forward` maps the input values to the output; `adjoint` maps an
    /// output cotangent back to one cotangent per input.
    pub fn linear_map(
        inputs: &[&Var<E>],
        forward: impl FnOnce(&[&Tensor<E>]) -> Result<Tensor<E>>,
        adjoint: impl FnOnce(&Tensor<E>) -> Result<Vec<Tensor<E>>> + 'static,
    ) -> Result<Var<E>> {
        let values: Vec<&Tensor<E>> = inputs.iter().map(|v| v.value()).collect();
        let out = forward(&values)?;
        let n = inputs.len();
        Ok(Self::from_op(out, inputs.iter().map(|&v| v.clone()).collect(), move |g| {
            let grads = adjoint(g)?;
            if grads.len() != n {
                return Err(Error::Graph(format!("adjoint returned {} cotangents for {} inputs", grads.len(), n)));
            }
            Ok(grads.into_iter().map(Some).collect())
        }))
    }
}

/// Maps model parameters to graph leaves for one forward pass.
///
/// In training mode every distinct parameter tensor becomes a single
/// gradient-tracking leaf (keyed by the parameter's address, so the model
/// must stay borrowed until gradients are read back). In inference mode
/// parameters are bound as constants.
pub struct Binder<E: Element> {
    track: bool,
    bound: RefCell<HashMap<usize, Var<E>>>,
}

impl<E: Element> Binder<E> {
    pub fn inference() -> Self {
        Binder { track: false, bound: RefCell::new(HashMap::new()) }
    }

    pub fn training() -> Self {
        Binder { track: true, bound: RefCell::new(HashMap::new()) }
    }

    pub fn is_training(&self) -> bool {
        self.track
    }

    pub fn bind(&self, p: &Tensor<E>) -> Var<E> {
        if !self.track {
            return Var::constant(p.clone());
        }
        let key = p as *const Tensor<E> as usize;
        self.bound.borrow_mut().entry(key).or_insert_with(|| Var::param(p.clone())).clone()
    }

    /// Gradient of a bound parameter; zeros if it was bound but unreached,
    /// `None` if it was never bound.
    pub fn grad_of(&self, p: &Tensor<E>) -> Option<Tensor<E>> {
        let key = p as *const Tensor<E> as usize;
        self.bound
            .borrow()
            .get(&key)
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(p.shape())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type Build = dyn Fn(&[Var<f64>]) -> Result<Var<f64>>;

    fn grad_check(inputs: &[Tensor<f64>], f: &Build) {
        let worst = crate::selftest::grad_check(inputs, f, 99).unwrap();
        assert!(worst < 1e-4, "relative error {worst}");
    }

    fn rn(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn linear_loss_grad_is_input() {
        let x = rn(&[5], 1);
        let w = Var::param(rn(&[5], 2));
        let loss = w.mul(&Var::constant(x.clone())).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), x);
    }

    #[test]
    fn mse_grad_closed_form() {
        let x = Var::param(rn(&[4, 3], 3));
        let y = rn(&[4, 3], 4);
        let loss = x.sub(&Var::constant(y.clone())).unwrap().square().mean();
        loss.backward().unwrap();
        let expected = x.value().sub(&y).unwrap().scale(2.0 / 12.0);
        assert!(x.grad().unwrap().max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn non_scalar_root_and_double_backward_are_errors() {
        let x = Var::param(rn(&[3], 5));
        let y = x.square();
        assert!(matches!(y.backward(), Err(Error::Graph(_))));
        let loss = y.sum();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::Graph(_))));
    }

    #[test]
    fn constants_do_not_record() {
        let a = Var::constant(rn(&[3], 6));
        let b = a.square().exp();
        assert!(!b.requires_grad());
        assert!(b.grad().is_none());
    }

    #[test]
    fn grad_elementwise_ops() {
        let a = rn(&[3, 4], 10);
        let b = rn(&[3, 4], 11);
        grad_check(&[a.clone(), b.clone()], &|v| v[0].add(&v[1]));
        grad_check(&[a.clone(), b.clone()], &|v| v[0].sub(&v[1]));
        grad_check(&[a.clone(), b.clone()], &|v| v[0].mul(&v[1]));
        grad_check(&[a.clone()], &|v| Ok(v[0].scale(-1.7).add_scalar(0.3)));
        grad_check(&[a.clone()], &|v| Ok(v[0].square()));
        grad_check(&[a.clone()], &|v| Ok(v[0].exp()));
        grad_check(&[a.clone()], &|v| Ok(v[0].gelu()));
        grad_check(&[a.clone()], &|v| Ok(v[0].softplus()));
        grad_check(&[a.clone(), rn(&[1], 12)], &|v| v[0].mul_scalar(&v[1]));
    }

    #[test]
    fn grad_soft_threshold() {
        // keep inputs away from the kinks at |x| == theta
        let x = Tensor::new(&[6], vec![-2.0, -0.9, -0.1, 0.2, 0.7, 1.6]).unwrap();
        grad_check(&[x, Tensor::scalar(0.4)], &|v| v[0].soft_threshold(&v[1]));
    }

    #[test]
    fn grad_reductions() {
        let a = rn(&[2, 5], 13);
        grad_check(&[a.clone()], &|v| Ok(v[0].sum()));
        grad_check(&[a.clone()], &|v| Ok(v[0].mean()));
        let target = rn(&[2, 5], 14);
        grad_check(&[a], &move |v| v[0].l1_mean(&target));
    }

    #[test]
    fn grad_shape_ops() {
        let a = rn(&[3, 2, 4], 15);
        let b = rn(&[3, 2, 3], 16);
        grad_check(&[a.clone()], &|v| v[0].reshape(&[6, 4]));
        grad_check(&[a.clone()], &|v| v[0].slice_last(1, 2));
        grad_check(&[a.clone(), b.clone()], &|v| Var::concat_last(&[&v[0], &v[1]]));
        grad_check(&[a.clone()], &|v| v[0].slice_axis0(1, 2));
        let c = rn(&[2, 2, 4], 17);
        grad_check(&[a, c], &|v| Var::concat_axis0(&[&v[0], &v[1]]));
    }

    #[test]
    fn grad_linear_algebra() {
        let x = rn(&[2, 3, 4], 18);
        grad_check(&[x.clone(), rn(&[4, 5], 19)], &|v| v[0].matmul(&v[1]));
        grad_check(&[x.clone(), rn(&[5, 4], 20)], &|v| v[0].matmul_t(&v[1]));
        grad_check(&[x, rn(&[4], 21)], &|v| v[0].add_bias(&v[1]));
    }

    #[test]
    fn grad_dwconv() {
        let x = rn(&[3, 3, 4, 2], 22);
        let k = rn(&[3, 3, 3, 2], 23);
        let b = rn(&[2], 24);
        grad_check(&[x.clone(), k.clone(), b.clone()], &|v| v[0].dwconv3d_causal(&v[1], &v[2], None));
        let cache = rn(&[2, 3, 4, 2], 25);
        grad_check(&[x, k, b], &move |v| v[0].dwconv3d_causal(&v[1], &v[2], Some(&cache)));
    }

    #[test]
    fn grad_layer_norm() {
        let x = rn(&[4, 6], 26);
        grad_check(&[x, rn(&[6], 27), rn(&[6], 28)], &|v| v[0].layer_norm_last(&v[1], &v[2], 1e-6));
    }

    #[test]
    fn grad_linear_map() {
        let m = rn(&[3, 4], 29);
        let mt = m.transpose2().unwrap();
        grad_check(&[rn(&[2, 3], 30)], &move |v| {
            let m2 = m.clone();
            let mt2 = mt.clone();
            Var::linear_map(&[&v[0]], |x| x[0].matmul_lastdim(&m2), move |g| Ok(vec![g.matmul_lastdim(&mt2)?]))
        });
    }

    #[test]
    fn soft_properties() {
        assert_eq!(soft(&Tensor::scalar(3.0f64), 1.0).unwrap().item(), 2.0);
        assert_eq!(soft(&Tensor::scalar(-0.5f64), 1.0).unwrap().item(), 0.0);
        let x = rn(&[50], 31);
        assert_eq!(soft(&x, 0.0).unwrap(), x);
        assert!(matches!(soft(&x, -0.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn binder_shares_one_leaf_per_parameter() {
        let p = rn(&[3], 32);
        let binder = Binder::training();
        let a = binder.bind(&p);
        let b = binder.bind(&p);
        let loss = a.add(&b).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(binder.grad_of(&p).unwrap(), Tensor::full(&[3], 2.0));
        assert!(!Binder::<f64>::inference().bind(&p).requires_grad());
    }
}
