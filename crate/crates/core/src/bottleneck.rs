//! Latent channel bottleneck: linear sensing `D -> d` and unfolded
//! ISTA-style recovery `d -> D`.
//!
//! Recovery starts from `p0 = Phi~ z` and runs `K` stages of
//!
//! ```text
//! r = p - rho * Phi^T (Phi p - z)
//! p = r + F~(soft(F(r), theta))
//! ```
//!
//! where `F` and `F~` are two non-residual NAF layers each.

use rand::Rng;

use crate::autograd::Var;
use crate::backbone::{naf_params, run_stack, stack, Ctx, NafLayer};
use crate::error::{dim_err, Result};
use crate::nn::{join, Init, Module};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BottleneckKind {
    /// Compressed-sensing recovery.
    #[default]
    Cs,
    /// Plain linear down/up projection followed by the same NAF stacks as
    /// residual post-processing (ablation baseline).
    Ae,
}

/// Initial threshold after the softplus map. Freshly initialized two-layer
/// NAF stacks emit values around 1e-4, so the threshold starts well below
/// that; a threshold above every input would zero the gradient of `f` and
/// of the threshold itself for good.
pub const THETA_INIT: f64 = 1e-5;
pub const RHO_INIT: f64 = 0.5;
pub const STAGE_DEPTH: usize = 2;

/// Sampled latent with its Gaussian parameters.
#[derive(Clone)]
pub struct Latent<E: Element> {
    pub z: Var<E>,
    pub mu: Var<E>,
    pub logvar: Var<E>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage<E: Element> {
    /// Step size, `[1]` (CS only).
    pub rho: Option<Tensor<E>>,
    /// Unconstrained threshold, `theta = softplus(theta_raw)`, `[1]` (CS only).
    pub theta_raw: Option<Tensor<E>>,
    pub f: Vec<NafLayer<E>>,
    pub f_tilde: Vec<NafLayer<E>>,
}

impl<E: Element> Stage<E> {
    /// Current threshold value.
    pub fn theta(&self) -> Option<E> {
        self.theta_raw.as_ref().map(|t| softplus(t.item()))
    }
}

fn softplus<E: Element>(x: E) -> E {
    if x > E::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck<E: Element> {
    pub kind: BottleneckKind,
    /// Sensing matrix `[d, D]`.
    pub phi: Tensor<E>,
    /// Log-variance head `[d, D]`.
    pub phi_sigma: Tensor<E>,
    /// Recovery initialization `[D, d]`.
    pub phi_tilde: Tensor<E>,
    pub stages: Vec<Stage<E>>,
}

/// Parameter count of a bottleneck.
pub fn bottleneck_params(kind: BottleneckKind, width: usize, latent: usize, stages: usize, expansion: usize) -> usize {
    let per_stage = 2 * STAGE_DEPTH * naf_params(width, expansion) + if kind == BottleneckKind::Cs { 2 } else { 0 };
    3 * latent * width + stages * per_stage
}

impl<E: Element> Bottleneck<E> {
    pub fn new(kind: BottleneckKind, width: usize, latent: usize, stages: usize, expansion: usize, init: &mut Init) -> Self {
        let phi = init.uniform(&[latent, width], width);
        let phi_sigma = init.uniform(&[latent, width], width);
        let phi_tilde = init.uniform(&[width, latent], latent);
        let stages = (0..stages)
            .map(|_| {
                let cs = kind == BottleneckKind::Cs;
                Stage {
                    rho: cs.then(|| Tensor::full(&[1], E::lit(RHO_INIT))),
                    theta_raw: cs.then(|| Tensor::full(&[1], E::lit(inverse_softplus(THETA_INIT)))),
                    f: stack(STAGE_DEPTH, width, expansion, false, init),
                    f_tilde: stack(STAGE_DEPTH, width, expansion, false, init),
                }
            })
            .collect();
        Bottleneck { kind, phi, phi_sigma, phi_tilde, stages }
    }

    pub fn width(&self) -> usize {
        self.phi.shape()[1]
    }

    pub fn latent_dim(&self) -> usize {
        self.phi.shape()[0]
    }

    /// `mu = Phi p`, `logvar = Phi_sigma p`; with `noise`, `z = mu + exp(logvar / 2) * eps`,
    /// otherwise `z = mu`.
    pub fn sense(&self, p: &Var<E>, ctx: &mut Ctx<'_, E>, noise: Option<&mut dyn rand::RngCore>) -> Result<Latent<E>> {
        if p.shape().last() != Some(&self.width()) {
            return Err(dim_err!("bottleneck of width {} applied to {:?}", self.width(), p.shape()));
        }
        let b = ctx.binder;
        let mu = p.matmul_t(&b.bind(&self.phi))?;
        let logvar = p.matmul_t(&b.bind(&self.phi_sigma))?;
        let z = match noise {
            Some(rng) => {
                let eps = Tensor::<E>::from_fn(mu.shape(), |_| E::lit(rng.sample(rand_distr::StandardNormal)));
                mu.add(&logvar.scale(E::lit(0.5)).exp().mul(&Var::constant(eps))?)?
            }
            None => mu.clone(),
        };
        Ok(Latent { z, mu, logvar })
    }

    /// Reconstructs the `D`-wide token grid from `z`.
    pub fn recover(&self, z: &Var<E>, ctx: &mut Ctx<'_, E>) -> Result<Var<E>> {
        self.recover_traced(z, ctx, None)
    }

    /// Inputs of the shrinkage of every CS stage during `recover(z)`.
    pub fn shrinkage_inputs(&self, z: &Tensor<E>) -> Result<Vec<Tensor<E>>> {
        let binder = crate::autograd::Binder::inference();
        let mut inputs = Vec::new();
        self.recover_traced(&Var::constant(z.clone()), &mut Ctx::new(&binder), Some(&mut inputs))?;
        Ok(inputs)
    }

    /// Whether each shrinkage input exceeds its threshold in magnitude; the
    /// points where `recover` is not smooth.
    pub fn shrinkage_pattern(&self, z: &Tensor<E>) -> Result<Vec<bool>> {
        let thetas = self.stages.iter().filter_map(|s| s.theta_raw.as_ref());
        Ok(self
            .shrinkage_inputs(z)?
            .iter()
            .zip(thetas)
            .flat_map(|(u, raw)| {
                let th = crate::autograd::softplus_scalar(raw.item());
                u.data().iter().map(move |v| v.abs() > th).collect::<Vec<_>>()
            })
            .collect())
    }

    fn recover_traced(&self, z: &Var<E>, ctx: &mut Ctx<'_, E>, mut trace: Option<&mut Vec<Tensor<E>>>) -> Result<Var<E>> {
        if z.shape().last() != Some(&self.latent_dim()) {
            return Err(dim_err!("latent width {} expected, got {:?}", self.latent_dim(), z.shape()));
        }
        let b = ctx.binder;
        let phi = b.bind(&self.phi);
        let mut p = z.matmul_t(&b.bind(&self.phi_tilde))?;
        for stage in &self.stages {
            p = match (&stage.rho, &stage.theta_raw) {
                (Some(rho), Some(theta_raw)) => {
                    let residual = p.matmul_t(&phi)?.sub(z)?.matmul(&phi)?;
                    let r = p.sub(&residual.mul_scalar(&b.bind(rho))?)?;
                    let u = run_stack(&stage.f, &r, ctx)?;
                    let theta = b.bind(theta_raw).softplus();
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(u.value().clone());
                    }
                    let s = u.soft_threshold(&theta)?;
                    r.add(&run_stack(&stage.f_tilde, &s, ctx)?)?
                }
                _ => {
                    let u = run_stack(&stage.f, &p, ctx)?;
                    p.add(&run_stack(&stage.f_tilde, &u, ctx)?)?
                }
            };
        }
        Ok(p)
    }
}

impl<E: Element> Module<E> for Bottleneck<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<E>)) {
        f(&join(prefix, "phi"), &self.phi);
        f(&join(prefix, "phi_sigma"), &self.phi_sigma);
        f(&join(prefix, "phi_tilde"), &self.phi_tilde);
        for (k, s) in self.stages.iter().enumerate() {
            let pre = join(prefix, &format!("stages.{k}"));
            if let Some(r) = &s.rho {
                f(&join(&pre, "rho"), r);
            }
            if let Some(t) = &s.theta_raw {
                f(&join(&pre, "theta_raw"), t);
            }
            s.f.visit(&join(&pre, "f"), f);
            s.f_tilde.visit(&join(&pre, "f_tilde"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "phi"), &mut self.phi);
        f(&join(prefix, "phi_sigma"), &mut self.phi_sigma);
        f(&join(prefix, "phi_tilde"), &mut self.phi_tilde);
        for (k, s) in self.stages.iter_mut().enumerate() {
            let pre = join(prefix, &format!("stages.{k}"));
            if let Some(r) = &mut s.rho {
                f(&join(&pre, "rho"), r);
            }
            if let Some(t) = &mut s.theta_raw {
                f(&join(&pre, "theta_raw"), t);
            }
            s.f.visit_mut(&join(&pre, "f"), f);
            s.f_tilde.visit_mut(&join(&pre, "f_tilde"), f);
        }
    }
}
