//! Built-in verification suites: wavelet reconstruction, causality, lossless
//! tiling and finite-difference gradient checks.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Binder, Var};
use crate::backbone::ArchVariant;
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::nn::Module;
use crate::patchifier::{analyze, PatchKind};
use crate::tensor::{Element, Tensor};
use crate::tiling::{split_rows, stream_decode, stream_encode, StreamState};
use crate::training::{clip_loss, LossHooks, LossWeights};
use crate::wavelet::{dwt2, dwt3, idwt2, idwt3};

/// Outcome of one suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed_ms: f64,
}

fn report(name: &str, start: Instant, outcome: Result<(bool, String)>) -> SuiteReport {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteReport { name: name.into(), passed, detail, elapsed_ms: start.elapsed().as_secs_f64() * 1e3 }
}

/// Small model used by the structural suites.
pub fn probe_config() -> ModelConfig {
    ModelConfig { d1: 4, d2: 6, width: 10, d: 3, ff_expansion: 2, variant: ArchVariant::Variant2, ..ModelConfig::default() }
}

// ---- wavelet -------------------------------------------------------------

/// Largest reconstruction errors over `trials` random 2D and 3D tensors.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct WaveletErrors {
    pub trials: usize,
    pub max_err_f32: f64,
    pub max_err_f64: f64,
}

fn roundtrip_err<E: Element>(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = rng.gen_range(1..4);
    let (t, h, w) = (2 * rng.gen_range(1..5), 2 * rng.gen_range(1..9), 2 * rng.gen_range(1..9));
    let x3 = Tensor::<E>::uniform(&[c, t, h, w], 1.0, rng);
    let x2 = Tensor::<E>::uniform(&[c, h, w], 1.0, rng);
    let e3 = idwt3(&dwt3(&x3)?)?.max_abs_diff(&x3)?;
    let e2 = idwt2(&dwt2(&x2)?)?.max_abs_diff(&x2)?;
    Ok(e3.max(e2).to_f64().unwrap_or(f64::INFINITY))
}

pub fn wavelet_errors(trials: usize, seed: u64) -> Result<WaveletErrors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut e32, mut e64) = (0f64, 0f64);
    for _ in 0..trials {
        e32 = e32.max(roundtrip_err::<f32>(&mut rng)?);
        e64 = e64.max(roundtrip_err::<f64>(&mut rng)?);
    }
    Ok(WaveletErrors { trials, max_err_f32: e32, max_err_f64: e64 })
}

// ---- causality -----------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct CausalityOutcome {
    pub trials: usize,
    /// Trials in which an earlier output changed.
    pub violations: usize,
    /// Trials in which the perturbation reached later outputs; guards
    /// against a model that ignores its input.
    pub propagated: usize,
}

/// Perturbs frames `f..` of a random clip and checks that latent rows before
/// `ceil(f / 4)` are bit-identical; then perturbs latent rows `r..` and checks
/// that frames before `4r - 3` are bit-identical. Each trial does both.
pub fn causality_trials<E: Element>(model: &Model<E>, trials: usize, seed: u64) -> Result<CausalityOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CausalityOutcome { trials, ..Default::default() };
    for _ in 0..trials {
        let blocks = rng.gen_range(1..5);
        let frames = 1 + 4 * blocks;
        let (h, w) = (8 * rng.gen_range(1..3), 8 * rng.gen_range(1..3));
        let x = Tensor::<E>::uniform(&[frames, h, w, 3], 1.0, &mut rng);
        let f = rng.gen_range(1..frames);
        let noise = Tensor::<E>::uniform(&[frames - f, h, w, 3], 1.0, &mut rng);
        let x2 = Tensor::concat_axis0(&[&x.slice_axis0(0, f)?, &noise])?;
        let (z, z2) = (model.encode(&x)?.z, model.encode(&x2)?.z);
        let keep = f.div_ceil(4);
        let mut violated = z.slice_axis0(0, keep)? != z2.slice_axis0(0, keep)?;
        let mut propagated = z != z2;

        let rows = z.shape()[0];
        let r = rng.gen_range(1..rows);
        let zn = Tensor::<E>::randn(&[rows - r, z.shape()[1], z.shape()[2], z.shape()[3]], &mut rng);
        let z3 = Tensor::concat_axis0(&[&z.slice_axis0(0, r)?, &zn])?;
        let (y, y3) = (model.decode(&z)?, model.decode(&z3)?);
        let keep = 4 * r - 3;
        violated |= y.slice_axis0(0, keep)? != y3.slice_axis0(0, keep)?;
        propagated &= y != y3;
        out.violations += violated as usize;
        out.propagated += propagated as usize;
    }
    Ok(out)
}

// ---- tiling --------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct TilingOutcome {
    pub trials: usize,
    pub max_encode_err: f64,
    pub max_decode_err: f64,
}

/// A random valid frame chunking: `1 + 4k` then multiples of 4.
pub fn random_frame_chunking(frames: usize, rng: &mut impl Rng) -> Vec<usize> {
    let blocks = (frames - 1) / 4;
    let first = rng.gen_range(0..=blocks);
    let mut plan = vec![1 + 4 * first];
    let mut left = blocks - first;
    while left > 0 {
        let k = rng.gen_range(1..=left);
        plan.push(4 * k);
        left -= k;
    }
    plan
}

/// A random latent-row chunking with at least one row per chunk.
pub fn random_row_chunking(rows: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut plan = Vec::new();
    let mut left = rows;
    while left > 0 {
        let k = rng.gen_range(1..=left);
        plan.push(k);
        left -= k;
    }
    plan
}

/// Streams random chunkings of random clips through encode and decode and
/// reports the largest deviation from the full pass.
pub fn tiling_trials<E: Element>(model: &Model<E>, frames: usize, trials: usize, seed: u64) -> Result<TilingOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = TilingOutcome { trials, ..Default::default() };
    for _ in 0..trials {
        let x = Tensor::<E>::uniform(&[frames, 16, 16, 3], 1.0, &mut rng);
        let full = model.encode(&x)?.z;
        let mut st = StreamState::new(model);
        let parts = stream_encode(model, &split_rows(&x, &random_frame_chunking(frames, &mut rng))?, &mut st)?;
        let z = Tensor::concat_axis0(&parts.iter().collect::<Vec<_>>())?;
        out.max_encode_err = out.max_encode_err.max(z.max_abs_diff(&full)?.to_f64().unwrap_or(f64::INFINITY));

        let video = model.decode(&full)?;
        let mut st = StreamState::new(model);
        let rows = random_row_chunking(full.shape()[0], &mut rng);
        let parts = stream_decode(model, &split_rows(&full, &rows)?, &mut st)?;
        let y = Tensor::concat_axis0(&parts.iter().collect::<Vec<_>>())?;
        out.max_decode_err = out.max_decode_err.max(y.max_abs_diff(&video)?.to_f64().unwrap_or(f64::INFINITY));
    }
    Ok(out)
}

// ---- gradients -----------------------------------------------------------

/// Graph builder for gradient checks.
pub type GraphFn<'a> = dyn Fn(&[Var<f64>]) -> Result<Var<f64>> + 'a;

/// Central-difference check of `d sum(f(inputs) * probe) / d inputs`.
/// Returns the largest relative error (denominator floored at 1e-6).
pub fn grad_check(inputs: &[Tensor<f64>], f: &GraphFn<'_>, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| Var::param(t.clone())).collect();
    let out = f(&vars)?;
    let probe = Tensor::<f64>::randn(out.shape(), &mut rng);
    out.mul(&Var::constant(probe.clone()))?.sum().backward()?;
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let vs: Vec<Var<f64>> = ins.iter().map(|t| Var::constant(t.clone())).collect();
        Ok(f(&vs)?.value().mul(&probe)?.sum())
    };
    let eps = 1e-5;
    let mut worst = 0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()));
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

/// Result of a directional finite-difference check over a module.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DirectionalCheck {
    pub tensors: usize,
    pub max_rel_err: f64,
    /// Directions discarded because a kink was crossed inside the stencil.
    pub redrawn: usize,
}

/// Checks `grads` (one per parameter of `module`, in visiting order) against
/// fourth-order central differences of `probe`, which returns the scalar
/// and the pattern of branch decisions at its kinks.
///
/// For each tensor a direction `v` is drawn with random magnitudes and the
/// gradient's signs, so `<grad, v>` cannot cancel down to rounding noise.
/// The step is sized to move the scalar well above its rounding error; if
/// the kink pattern changes anywhere in the stencil the direction is redrawn
/// with a shorter step.
fn directional_check<M: Module<f64> + Clone>(
    module: &M,
    grads: &[Tensor<f64>],
    probe: &dyn Fn(&M) -> Result<(f64, Vec<bool>)>,
    rng: &mut ChaCha8Rng,
) -> Result<DirectionalCheck> {
    let base_pattern = probe(module)?.1;
    let mut out = DirectionalCheck { tensors: grads.len(), max_rel_err: 0.0, redrawn: 0 };
    for (t, g) in grads.iter().enumerate() {
        let mut shrink = 1.0;
        for attempt in 0.. {
            let v = Tensor::<f64>::randn(g.shape(), rng).zip_map(g, |r, gi| r.abs() * gi.signum())?;
            let analytic = g.mul(&v)?.sum();
            let eps = shrink * (1e-8 / analytic.abs()).clamp(1e-6, 1e-2);
            let shifted = |delta: f64| {
                let mut m = module.clone();
                let mut k = 0;
                m.visit_mut("", &mut |_, p| {
                    if k == t {
                        *p = p.add(&v.scale(delta)).expect("same shape");
                    }
                    k += 1;
                });
                m
            };
            let mut values = [0.0; 4];
            let mut smooth = true;
            for (k, step) in [-2.0, -1.0, 1.0, 2.0].into_iter().enumerate() {
                let (l, pattern) = probe(&shifted(step * eps))?;
                values[k] = l;
                smooth &= pattern == base_pattern;
            }
            if !smooth && attempt < 20 {
                out.redrawn += 1;
                shrink *= 0.3;
                continue;
            }
            let numeric = (8.0 * (values[2] - values[1]) - (values[3] - values[0])) / (12.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
            out.max_rel_err = out.max_rel_err.max(rel);
            break;
        }
    }
    Ok(out)
}

fn sign_pattern(v: &Tensor<f64>, target: &Tensor<f64>) -> Vec<bool> {
    v.data().iter().zip(target.data()).map(|(a, b)| a > b).collect()
}

/// Moves the recovery network to a well-conditioned check point. Fresh
/// non-residual NAF layers shrink their input roughly 30-fold, which makes
/// the stage branches too weak for finite differences on the loss to
/// resolve; scaling the kernel and both projections by 3 restores a gain
/// near 1. Each stage threshold is then placed in the middle of the widest
/// gap between the sorted magnitudes of its inputs at `z` (stage by stage,
/// since later inputs depend on earlier thresholds), so both shrinkage
/// branches are exercised and no input sits near a kink.
fn condition_recovery(b: &mut crate::bottleneck::Bottleneck<f64>, z: &Tensor<f64>) -> Result<()> {
    for stage in &mut b.stages {
        for layer in stage.f.iter_mut().chain(stage.f_tilde.iter_mut()) {
            for w in [&mut layer.kernel, &mut layer.w1, &mut layer.w2] {
                *w = w.scale(3.0);
            }
        }
    }
    for k in 0..b.stages.len() {
        if b.stages[k].theta_raw.is_none() {
            continue;
        }
        let u = &b.shrinkage_inputs(z)?[k];
        let mut mags: Vec<f64> = u.data().iter().map(|v| v.abs()).collect();
        mags.sort_by(f64::total_cmp);
        let (lo, hi) = mags.windows(2).map(|w| (w[0], w[1])).fold((0.0, mags[0]), |best, w| {
            if w.1 - w.0 > best.1 - best.0 {
                w
            } else {
                best
            }
        });
        let theta = 0.5 * (lo + hi);
        b.stages[k].theta_raw = Some(Tensor::full(&[1], crate::bottleneck::inverse_softplus(theta)));
    }
    Ok(())
}

/// Directional finite-difference check of the full training loss (RGB and
/// Haar L1 plus KL, deterministic latents) for every parameter tensor of a
/// freshly initialized model. The L1 residual signs and the shrinkage
/// active sets form the kink pattern.
pub fn end_to_end_grad_check(config: &ModelConfig, seed: u64) -> Result<DirectionalCheck> {
    let mut model = Model::<f64>::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::uniform(&[5, 16, 16, 3], 1.0, &mut rng);
    let z = model.encode(&x)?.z;
    condition_recovery(&mut model.bottleneck, &z)?;
    let coeffs = analyze(PatchKind::Haar, &x, true)?.flatten();
    let weights = LossWeights { lambda_kl: 0.1, ..LossWeights::default() };
    let hooks = LossHooks::default();
    let probe = |m: &Model<f64>| -> Result<(f64, Vec<bool>)> {
        let b = Binder::inference();
        let loss = clip_loss(m, &x, &b, &weights, &hooks, None)?.1.total;
        let z = m.encode(&x)?.z;
        let y = m.decode(&z)?;
        let mut pattern = m.bottleneck.shrinkage_pattern(&z)?;
        pattern.extend(sign_pattern(&y, &x));
        pattern.extend(sign_pattern(&analyze(PatchKind::Haar, &y, true)?.flatten(), &coeffs));
        Ok((loss, pattern))
    };
    let binder = Binder::training();
    let (loss, _) = clip_loss(&model, &x, &binder, &weights, &hooks, None)?;
    loss.backward()?;
    let mut grads = Vec::new();
    model.visit("", &mut |_, p| grads.push(binder.grad_of(p).unwrap_or_else(|| Tensor::zeros(p.shape()))));
    directional_check(&model, &grads, &probe, &mut rng)
}

/// Directional check of the recovery network alone, `sum(recover(z) * w)`.
/// Inside the full loss the stage branches are too weak at initialization
/// for finite differences on the loss to resolve their gradients.
pub fn recovery_grad_check(config: &ModelConfig, seed: u64) -> Result<DirectionalCheck> {
    let mut bottleneck = Model::<f64>::new(config.clone())?.bottleneck;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::<f64>::randn(&[3, 2, 2, config.d], &mut rng);
    condition_recovery(&mut bottleneck, &z)?;
    let w = Tensor::<f64>::randn(&[3, 2, 2, config.width], &mut rng);
    let value = |b: &crate::bottleneck::Bottleneck<f64>, binder: &Binder<f64>| -> Result<Var<f64>> {
        let p = b.recover(&Var::constant(z.clone()), &mut crate::backbone::Ctx::new(binder))?;
        Ok(p.mul(&Var::constant(w.clone()))?.sum())
    };
    let probe = |b: &crate::bottleneck::Bottleneck<f64>| -> Result<(f64, Vec<bool>)> {
        let v = value(b, &Binder::inference())?.value().item();
        Ok((v, b.shrinkage_pattern(&z)?))
    };
    let binder = Binder::training();
    value(&bottleneck, &binder)?.backward()?;
    let mut grads = Vec::new();
    bottleneck.visit("", &mut |_, p| grads.push(binder.grad_of(p).unwrap_or_else(|| Tensor::zeros(p.shape()))));
    directional_check(&bottleneck, &grads, &probe, &mut rng)
}

/// Gradient checks of the primitive operations.
pub fn op_grad_checks(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rn = |shape: &[usize]| Tensor::<f64>::randn(shape, &mut rng);
    let (a, b) = (rn(&[3, 4]), rn(&[3, 4]));
    let s = rn(&[1]);
    let (x3, w45, w54, bias) = (rn(&[2, 3, 4]), rn(&[4, 5]), rn(&[5, 4]), rn(&[4]));
    let (vx, vk, vb, cache) = (rn(&[3, 3, 4, 2]), rn(&[3, 3, 3, 2]), rn(&[2]), rn(&[2, 3, 4, 2]));
    let (ln, g6, b6) = (rn(&[4, 6]), rn(&[6]), rn(&[6]));
    let target = rn(&[3, 4]);
    let kinked = Tensor::new(&[6], vec![-2.0, -0.9, -0.1, 0.2, 0.7, 1.6])?;
    let (c1, c2) = (rn(&[3, 2, 4]), rn(&[3, 2, 3]));
    type Case<'a> = (&'static str, Vec<Tensor<f64>>, Box<GraphFn<'a>>);
    let cases: Vec<Case<'_>> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|v| v[0].add(&v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|v| v[0].sub(&v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|v| v[0].mul(&v[1]))),
        ("scale", vec![a.clone()], Box::new(|v| Ok(v[0].scale(-1.7).add_scalar(0.3)))),
        ("mul_scalar", vec![a.clone(), s], Box::new(|v| v[0].mul_scalar(&v[1]))),
        ("square", vec![a.clone()], Box::new(|v| Ok(v[0].square()))),
        ("exp", vec![a.clone()], Box::new(|v| Ok(v[0].exp()))),
        ("gelu", vec![a.clone()], Box::new(|v| Ok(v[0].gelu()))),
        ("softplus", vec![a.clone()], Box::new(|v| Ok(v[0].softplus()))),
        ("soft_threshold", vec![kinked, Tensor::scalar(0.4)], Box::new(|v| v[0].soft_threshold(&v[1]))),
        ("sum", vec![a.clone()], Box::new(|v| Ok(v[0].sum()))),
        ("mean", vec![a.clone()], Box::new(|v| Ok(v[0].mean()))),
        ("l1_mean", vec![a.clone()], Box::new(move |v| v[0].l1_mean(&target))),
        ("reshape", vec![c1.clone()], Box::new(|v| v[0].reshape(&[6, 4]))),
        ("slice_last", vec![c1.clone()], Box::new(|v| v[0].slice_last(1, 2))),
        ("concat_last", vec![c1.clone(), c2], Box::new(|v| Var::concat_last(&[&v[0], &v[1]]))),
        ("slice_axis0", vec![c1.clone()], Box::new(|v| v[0].slice_axis0(1, 2))),
        ("concat_axis0", vec![c1.clone(), c1], Box::new(|v| Var::concat_axis0(&[&v[0], &v[1]]))),
        ("matmul", vec![x3.clone(), w45], Box::new(|v| v[0].matmul(&v[1]))),
        ("matmul_t", vec![x3.clone(), w54], Box::new(|v| v[0].matmul_t(&v[1]))),
        ("add_bias", vec![x3, bias], Box::new(|v| v[0].add_bias(&v[1]))),
        ("dwconv3d", vec![vx.clone(), vk.clone(), vb.clone()], Box::new(|v| v[0].dwconv3d_causal(&v[1], &v[2], None))),
        ("dwconv3d_cached", vec![vx, vk, vb], Box::new(move |v| v[0].dwconv3d_causal(&v[1], &v[2], Some(&cache)))),
        ("layer_norm", vec![ln, g6, b6], Box::new(|v| v[0].layer_norm_last(&v[1], &v[2], 1e-6))),
    ];
    cases.into_iter().enumerate().map(|(i, (name, ins, f))| Ok((name, grad_check(&ins, &*f, seed ^ i as u64)?))).collect()
}

// ---- driver --------------------------------------------------------------

pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    let mut out = Vec::new();

    let t = Instant::now();
    out.push(report(
        "wavelet_roundtrip",
        t,
        wavelet_errors(200, seed).map(|e| {
            (e.max_err_f32 < 1e-6 && e.max_err_f64 < 1e-12, format!("f32 {:.2e}, f64 {:.2e}", e.max_err_f32, e.max_err_f64))
        }),
    ));

    let t = Instant::now();
    let causal = Model::<f64>::new(probe_config()).and_then(|m| causality_trials(&m, 20, seed));
    out.push(report(
        "causality",
        t,
        causal.map(|c| (c.violations == 0, format!("{} trials, {} violations, {} propagated", c.trials, c.violations, c.propagated))),
    ));

    let t = Instant::now();
    let tiling = Model::<f64>::new(probe_config()).and_then(|m| tiling_trials(&m, 17, 10, seed));
    out.push(report(
        "tiling_equivalence",
        t,
        tiling.map(|o| {
            (
                o.max_encode_err < 1e-12 && o.max_decode_err < 1e-12,
                format!("encode {:.2e}, decode {:.2e}", o.max_encode_err, o.max_decode_err),
            )
        }),
    ));

    let t = Instant::now();
    let grads = op_grad_checks(seed).and_then(|ops| {
        let e2e = end_to_end_grad_check(&probe_config(), seed)?;
        let rec = recovery_grad_check(&probe_config(), seed)?;
        let (name, worst) = ops.iter().copied().fold(("", 0f64), |a, b| if b.1 > a.1 { b } else { a });
        Ok((
            worst < 1e-4 && e2e.max_rel_err < 1e-4 && rec.max_rel_err < 1e-4,
            format!(
                "worst op {name} {worst:.2e}, end-to-end {:.2e} over {} tensors, recovery {:.2e}",
                e2e.max_rel_err, e2e.tensors, rec.max_rel_err
            ),
        ))
    });
    out.push(report("gradient_check", t, grads));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass() {
        for r in run_all(3) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn chunkings_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = random_frame_chunking(17, &mut rng);
            assert_eq!(p.iter().sum::<usize>(), 17);
            assert_eq!(p[0] % 4, 1);
            assert!(p[1..].iter().all(|&c| c > 0 && c % 4 == 0));
            let r = random_row_chunking(5, &mut rng);
            assert_eq!(r.iter().sum::<usize>(), 5);
        }
    }

    #[test]
    fn recovery_check_exercises_both_shrinkage_branches() {
        let cfg = probe_config();
        let b = Model::<f64>::new(cfg.clone()).unwrap().bottleneck;
        let z = Tensor::<f64>::randn(&[3, 2, 2, cfg.d], &mut ChaCha8Rng::seed_from_u64(0));
        let p = b.shrinkage_pattern(&z).unwrap();
        let active = p.iter().filter(|&&a| a).count();
        assert!(active > 0 && active < p.len(), "{active} of {}", p.len());
    }

    #[test]
    fn perturbations_reach_later_outputs() {
        let m = Model::<f64>::new(probe_config()).unwrap();
        let c = causality_trials(&m, 3, 5).unwrap();
        assert_eq!(c.violations, 0);
        assert_eq!(c.propagated, 3);
    }
}
