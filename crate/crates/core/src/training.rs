//! Loss assembly, Adam, learning-rate schedule, synthetic clips and the
//! training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Binder, Var};
use crate::backbone::Ctx;
use crate::error::{Error, Result};
use crate::metrics::{psnr, serialize_metric};
use crate::model::{kl_term, Model, ModelConfig};
use crate::nn::Module;
use crate::patchifier::{analyze, analyze_flat_var, PatchKind};
use crate::tensor::{Element, Tensor};

// ---- losses --------------------------------------------------------------

fn default_kl() -> f64 {
    1e-7
}
fn yes() -> bool {
    true
}

/// Loss term weights. Terms with zero weight are not evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default)]
    pub lambda_lpips: f64,
    #[serde(default)]
    pub lambda_adv: f64,
    #[serde(default = "default_kl")]
    pub lambda_kl: f64,
    /// L1 in pixel space.
    #[serde(default = "yes")]
    pub rgb: bool,
    /// L1 over Haar coefficients.
    #[serde(default = "yes")]
    pub frequency: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_lpips: 0.0, lambda_adv: 0.0, lambda_kl: default_kl(), rgb: true, frequency: true }
    }
}

/// A pluggable loss term `(x_hat, x) -> scalar`.
pub type LossHook<E> = Box<dyn Fn(&Var<E>, &Tensor<E>) -> Result<Var<E>> + Send + Sync>;

/// Slots for the perceptual and adversarial terms; unbound by default.
pub struct LossHooks<E: Element> {
    pub lpips: Option<LossHook<E>>,
    pub adv: Option<LossHook<E>>,
}

impl<E: Element> Default for LossHooks<E> {
    fn default() -> Self {
        LossHooks { lpips: None, adv: None }
    }
}

/// Scalar loss values of one clip or averaged over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rgb: f64,
    pub frequency: f64,
    pub kl: f64,
    pub lpips: f64,
    pub adv: f64,
}

impl LossBreakdown {
    pub fn recon(&self) -> f64 {
        self.rgb + self.frequency
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.rgb, self.frequency, self.kl, self.lpips, self.adv].iter().all(|v| v.is_finite())
    }

    fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let s = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            total: s(|b| b.total),
            rgb: s(|b| b.rgb),
            frequency: s(|b| b.frequency),
            kl: s(|b| b.kl),
            lpips: s(|b| b.lpips),
            adv: s(|b| b.adv),
        }
    }
}

fn val<E: Element>(v: &Var<E>) -> f64 {
    v.value().item().to_f64().expect("float")
}

/// Mean L1 in RGB plus mean L1 over all Haar coefficients (image frame 2D,
/// later frames 3D), for a clip with a lead frame.
pub fn recon_loss<E: Element>(x: &Tensor<E>, x_hat: &Var<E>, weights: &LossWeights) -> Result<(Var<E>, LossBreakdown)> {
    x.expect_same_shape(x_hat.value(), "recon_loss")?;
    let mut terms: Vec<Var<E>> = Vec::new();
    let mut parts = LossBreakdown::default();
    if weights.rgb {
        let t = x_hat.l1_mean(x)?;
        parts.rgb = val(&t);
        terms.push(t);
    }
    if weights.frequency {
        let target = analyze(PatchKind::Haar, x, true)?.flatten();
        let t = analyze_flat_var(PatchKind::Haar, x_hat, true)?.l1_mean(&target)?;
        parts.frequency = val(&t);
        terms.push(t);
    }
    let total = match terms.split_first() {
        Some((first, rest)) => rest.iter().try_fold(first.clone(), |a, t| a.add(t))?,
        None => return Err(Error::Parameter("no reconstruction domain is active".into())),
    };
    parts.total = val(&total);
    Ok((total, parts))
}

/// Full objective for one clip.
pub fn clip_loss<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    binder: &Binder<E>,
    weights: &LossWeights,
    hooks: &LossHooks<E>,
    noise: Option<&mut dyn rand::RngCore>,
) -> Result<(Var<E>, LossBreakdown)> {
    let mut ctx = Ctx::new(binder);
    let latent = model.encode_var(x, true, &mut ctx, noise)?;
    let x_hat = model.decode_var(&latent.z, true, &mut ctx)?;
    let (mut total, mut parts) = recon_loss(x, &x_hat, weights)?;
    if weights.lambda_kl != 0.0 {
        let kl = kl_term(&latent.mu, &latent.logvar)?;
        parts.kl = val(&kl);
        total = total.add(&kl.scale(E::lit(weights.lambda_kl)))?;
    }
    for (lambda, hook, slot, name) in [
        (weights.lambda_lpips, &hooks.lpips, &mut parts.lpips, "lpips"),
        (weights.lambda_adv, &hooks.adv, &mut parts.adv, "adversarial"),
    ] {
        if lambda != 0.0 {
            let f = hook.as_ref().ok_or_else(|| Error::Parameter(format!("{name} weight is {lambda} but no {name} hook is bound")))?;
            let t = f(&x_hat, x)?;
            *slot = val(&t);
            total = total.add(&t.scale(E::lit(lambda)))?;
        }
    }
    parts.total = val(&total);
    Ok((total, parts))
}

/// Gradients of the batch-mean loss, in parameter visiting order.
///
/// Clips are processed in parallel, each on its own graph; per-clip
/// gradients are summed in batch order so the result does not depend on
/// scheduling. `noise_seed` drives reparameterized sampling (`None`
/// disables it).
pub fn batch_gradients<E: Element>(
    model: &Model<E>,
    batch: &[Tensor<E>],
    weights: &LossWeights,
    hooks: &LossHooks<E>,
    noise_seed: Option<u64>,
) -> Result<(Vec<Tensor<E>>, LossBreakdown)> {
    let per_clip: Vec<Result<(Vec<Tensor<E>>, LossBreakdown)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let binder = Binder::training();
            let mut rng = noise_seed.map(|s| {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                r.set_stream(i as u64 + 1);
                r
            });
            let noise = rng.as_mut().map(|r| r as &mut dyn rand::RngCore);
            let (loss, parts) = clip_loss(model, x, &binder, weights, hooks, noise)?;
            loss.backward()?;
            let mut grads = Vec::new();
            model.visit("", &mut |_, p| grads.push(binder.grad_of(p).unwrap_or_else(|| Tensor::zeros(p.shape()))));
            Ok((grads, parts))
        })
        .collect();
    let mut sum: Option<Vec<Tensor<E>>> = None;
    let mut parts = Vec::with_capacity(batch.len());
    for r in per_clip {
        let (g, p) = r?;
        parts.push(p);
        sum = Some(match sum {
            None => g,
            Some(acc) => acc.iter().zip(&g).map(|(a, b)| a.add(b)).collect::<Result<_>>()?,
        });
    }
    let scale = E::one() / E::lit(batch.len().max(1) as f64);
    let grads = sum.unwrap_or_default().into_iter().map(|g| g.scale(scale)).collect();
    Ok((grads, LossBreakdown::mean(&parts)))
}

// ---- optimization --------------------------------------------------------

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<E: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
}

impl<E: Element> Adam<E> {
    pub const BETA1: f64 = 0.5;
    pub const BETA2: f64 = 0.9;

    pub fn new<M: Module<E>>(model: &M) -> Self {
        let mut m = Vec::new();
        model.visit("", &mut |_, p| m.push(Tensor::zeros(p.shape())));
        Adam { beta1: Self::BETA1, beta2: Self::BETA2, eps: 1e-8, step: 0, v: m.clone(), m }
    }

    /// Applies one update with learning rate `lr`.
    pub fn update<M: Module<E>>(&mut self, model: &mut M, grads: &[Tensor<E>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Parameter(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.step += 1;
        let (b1, b2) = (E::lit(self.beta1), E::lit(self.beta2));
        let c1 = E::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = E::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (E::lit(lr), E::lit(self.eps));
        let mut i = 0;
        let mut failure = None;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |name, p| {
            let g = &grads[i];
            if g.shape() != p.shape() {
                failure.get_or_insert_with(|| Error::Parameter(format!("gradient shape {:?} for {name} {:?}", g.shape(), p.shape())));
                i += 1;
                return;
            }
            let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (E::one() - b1) * gv;
                *vv = b2 * *vv + (E::one() - b2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
            }
            i += 1;
        });
        failure.map_or(Ok(()), Err)
    }
}

/// Linear warmup then cosine decay to a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup: usize,
    pub total: usize,
    pub floor: f64,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base_lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let t = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.floor + 0.5 * (self.base_lr - self.floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Rescales gradients to global norm `max_norm` when they exceed it.
/// Returns the pre-clipping norm and whether clipping happened.
pub fn clip_global_norm<E: Element>(grads: &mut [Tensor<E>], max_norm: f64) -> (f64, bool) {
    let norm = grads.iter().map(|g| g.sq_norm().to_f64().expect("float")).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = E::lit(max_norm / norm);
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
        (norm, true)
    } else {
        (norm, false)
    }
}

// ---- synthetic data ------------------------------------------------------

/// Seeded generator of moving rectangles and Gaussian blobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl SyntheticCorpus {
    pub fn new(seed: u64, frames: usize, height: usize, width: usize) -> Self {
        SyntheticCorpus { seed, frames, height, width }
    }

    /// Clip `index` as `[F, H, W, 3]` in `[-1, 1]`; a pure function of
    /// `(seed, index)`.
    pub fn clip<E: Element>(&self, index: u64) -> Tensor<E> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let (f, h, w) = (self.frames, self.height, self.width);
        let (hf, wf) = (h as f64, w as f64);
        let color = |rng: &mut ChaCha8Rng| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let background = color(&mut rng).map(|c: f64| 0.5 * c - 0.3);
        struct Rect {
            y: f64,
            x: f64,
            vy: f64,
            vx: f64,
            h: f64,
            w: f64,
            c: [f64; 3],
        }
        struct Blob {
            y: f64,
            x: f64,
            vy: f64,
            vx: f64,
            sigma: f64,
            c: [f64; 3],
        }
        let rects: Vec<Rect> = (0..rng.gen_range(1..=3))
            .map(|_| Rect {
                y: rng.gen_range(0.0..hf),
                x: rng.gen_range(0.0..wf),
                vy: rng.gen_range(-1.5..1.5),
                vx: rng.gen_range(-1.5..1.5),
                h: rng.gen_range(hf / 6.0..hf / 2.0),
                w: rng.gen_range(wf / 6.0..wf / 2.0),
                c: color(&mut rng),
            })
            .collect();
        let blobs: Vec<Blob> = (0..rng.gen_range(1..=2))
            .map(|_| Blob {
                y: rng.gen_range(0.0..hf),
                x: rng.gen_range(0.0..wf),
                vy: rng.gen_range(-1.5..1.5),
                vx: rng.gen_range(-1.5..1.5),
                sigma: rng.gen_range(2.0..5.0f64.max(hf / 8.0)),
                c: color(&mut rng),
            })
            .collect();
        let mut data = vec![E::zero(); f * h * w * 3];
        for t in 0..f {
            let tf = t as f64;
            for yi in 0..h {
                for xi in 0..w {
                    let (py, px) = (yi as f64 + 0.5, xi as f64 + 0.5);
                    let mut pix = background;
                    for r in &rects {
                        let (cy, cx) = (r.y + r.vy * tf, r.x + r.vx * tf);
                        if (py - cy).abs() <= r.h / 2.0 && (px - cx).abs() <= r.w / 2.0 {
                            pix = r.c;
                        }
                    }
                    for b in &blobs {
                        let (dy, dx) = (py - b.y - b.vy * tf, px - b.x - b.vx * tf);
                        let a = (-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma)).exp();
                        for k in 0..3 {
                            pix[k] = pix[k] * (1.0 - a) + b.c[k] * a;
                        }
                    }
                    let o = ((t * h + yi) * w + xi) * 3;
                    for k in 0..3 {
                        data[o + k] = E::lit(pix[k].clamp(-1.0, 1.0));
                    }
                }
            }
        }
        Tensor::new(&[f, h, w, 3], data).expect("consistent shape")
    }

    pub fn batch<E: Element>(&self, indices: impl IntoIterator<Item = u64>) -> Vec<Tensor<E>> {
        indices.into_iter().map(|i| self.clip(i)).collect()
    }
}

// ---- training loop -------------------------------------------------------

fn d_steps() -> usize {
    5000
}
fn d_batch() -> usize {
    4
}
fn d_lr() -> f64 {
    2e-3
}
fn d_warmup() -> usize {
    100
}
fn d_floor() -> f64 {
    1e-4
}
fn d_clip() -> f64 {
    1.0
}
fn d_frames() -> usize {
    17
}
fn d_side() -> usize {
    32
}
fn d_heldout() -> usize {
    8
}
fn d_log() -> usize {
    50
}
fn d_eval() -> usize {
    500
}

/// Optimization and data settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup: usize,
    #[serde(default = "d_floor")]
    pub lr_floor: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default = "d_frames")]
    pub frames: usize,
    #[serde(default = "d_side")]
    pub height: usize,
    #[serde(default = "d_side")]
    pub width: usize,
    /// Seed of the training corpus; held-out clips use a derived seed.
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "d_heldout")]
    pub heldout: usize,
    /// Train on clip 0 only.
    #[serde(default)]
    pub single_clip: bool,
    /// Sample latents with the reparameterization trick.
    #[serde(default = "yes")]
    pub sample_latent: bool,
    #[serde(default = "d_log")]
    pub log_every: usize,
    #[serde(default = "d_eval")]
    pub eval_every: usize,
    /// Periodic checkpoints; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

/// Everything `run_training` needs; the TOML layout has `[model]`, `[loss]`
/// and `[train]` tables.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub train: TrainParams,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Input(format!("config: {e}")))
    }

    pub fn schedule(&self) -> Schedule {
        Schedule { base_lr: self.train.lr, warmup: self.train.warmup, total: self.train.steps, floor: self.train.lr_floor }
    }

    pub fn corpus(&self) -> SyntheticCorpus {
        SyntheticCorpus::new(self.train.data_seed, self.train.frames, self.train.height, self.train.width)
    }

    pub fn heldout_corpus(&self) -> SyntheticCorpus {
        SyntheticCorpus { seed: self.train.data_seed ^ 0x5eed_0f_4e1d_0u64, ..self.corpus() }
    }
}

/// One training step's report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Model plus optimizer state.
pub struct Trainer<E: Element> {
    pub model: Model<E>,
    pub opt: Adam<E>,
    pub config: TrainConfig,
    pub hooks: LossHooks<E>,
    pub step: usize,
}

impl<E: Element> Trainer<E> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let model = Model::new(config.model.clone())?;
        let opt = Adam::new(&model);
        Ok(Trainer { model, opt, config, hooks: LossHooks::default(), step: 0 })
    }

    /// Indices of the training clips for `step`.
    pub fn batch_indices(&self, step: usize) -> Vec<u64> {
        let b = self.config.train.batch as u64;
        if self.config.train.single_clip {
            vec![0; b as usize]
        } else {
            (0..b).map(|i| step as u64 * b + i).collect()
        }
    }

    /// One optimization step on `batch` with learning rate `lr`.
    pub fn train_step_with_lr(&mut self, batch: &[Tensor<E>], lr: f64) -> Result<StepReport> {
        let noise = self.config.train.sample_latent.then(|| self.config.model.seed ^ (self.step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let (mut grads, loss) = batch_gradients(&self.model, batch, &self.config.loss, &self.hooks, noise)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step: self.step, detail: format!("{loss:?}") });
        }
        let (grad_norm, clipped) = clip_global_norm(&mut grads, self.config.train.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { step: self.step, detail: format!("gradient norm {grad_norm}; loss {loss:?}") });
        }
        self.opt.update(&mut self.model, &grads, lr)?;
        let report = StepReport { step: self.step, lr, loss, grad_norm, clipped };
        self.step += 1;
        Ok(report)
    }

    /// One scheduled step on the corpus batch for the current step.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let batch = self.config.corpus().batch(self.batch_indices(self.step));
        let lr = self.config.schedule().lr(self.step);
        self.train_step_with_lr(&batch, lr)
    }

    /// Mean inference-mode PSNR over the held-out clips.
    pub fn heldout_psnr(&self) -> Result<f64> {
        let corpus = self.config.heldout_corpus();
        let scores: Vec<Result<f64>> = (0..self.config.train.heldout as u64)
            .into_par_iter()
            .map(|i| {
                let x: Tensor<E> = corpus.clip(i);
                let y = self.model.decode(&self.model.encode(&x)?.z)?;
                psnr(&x, &y)
            })
            .collect();
        let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
    }

    /// Inference-mode reconstruction losses on the held-out clips.
    /// Inference-mode loss (deterministic latents) on one clip.
    pub fn eval_loss(&self, x: &Tensor<E>) -> Result<LossBreakdown> {
        let binder = Binder::inference();
        Ok(clip_loss(&self.model, x, &binder, &self.config.loss, &self.hooks, None)?.1)
    }

    pub fn heldout_loss(&self) -> Result<LossBreakdown> {
        let corpus = self.config.heldout_corpus();
        let items: Vec<Result<LossBreakdown>> =
            (0..self.config.train.heldout as u64).into_par_iter().map(|i| self.eval_loss(&corpus.clip(i))).collect();
        Ok(LossBreakdown::mean(&items.into_iter().collect::<Result<Vec<_>>>()?))
    }
}

/// One line of the JSON-lines metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub rgb: f64,
    pub frequency: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "opt_metric", default)]
    pub heldout_psnr: Option<f64>,
}

fn opt_metric<S: serde::Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => serialize_metric(x, s),
        None => s.serialize_none(),
    }
}

/// Outcome of [`run_training`].
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    #[serde(serialize_with = "serialize_metric")]
    pub initial_psnr: f64,
    #[serde(serialize_with = "serialize_metric")]
    pub final_psnr: f64,
    pub first_loss: LossBreakdown,
    pub final_loss: LossBreakdown,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub wall_time_s: f64,
}

/// Trains from scratch, writing `metrics.jsonl`, periodic checkpoints and a
/// final `model.lvck` into `out_dir`. On a non-finite loss a
/// `diagnostics.json` is written before the error is returned.
pub fn run_training(config: &TrainConfig, out_dir: &Path) -> Result<TrainSummary> {
    let start = std::time::Instant::now();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("metrics.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut trainer = Trainer::<f32>::new(config.clone())?;
    let initial_psnr = trainer.heldout_psnr()?;
    let mut first_loss = None;
    let mut last = None;
    let steps = config.train.steps;
    for step in 0..steps {
        let report = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => {
                let diag = out_dir.join("diagnostics.json");
                let body = serde_json::json!({ "step": step, "error": e.to_string(), "last_report": last });
                std::fs::write(&diag, serde_json::to_vec_pretty(&body).expect("json")).map_err(|e| Error::io(&diag, e))?;
                return Err(e);
            }
        };
        first_loss.get_or_insert(report.loss);
        let done = step + 1;
        let eval = done == steps || (config.train.eval_every > 0 && done % config.train.eval_every == 0);
        if eval || step == 0 || (config.train.log_every > 0 && done % config.train.log_every == 0) {
            let record = LogRecord {
                step: done,
                lr: report.lr,
                loss: report.loss.total,
                rgb: report.loss.rgb,
                frequency: report.loss.frequency,
                kl: report.loss.kl,
                grad_norm: report.grad_norm,
                clipped: report.clipped,
                heldout_psnr: if eval { Some(trainer.heldout_psnr()?) } else { None },
            };
            let line = serde_json::to_string(&record).expect("json");
            writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))?;
        }
        if config.train.checkpoint_every > 0 && done % config.train.checkpoint_every == 0 && done != steps {
            trainer.model.save(&out_dir.join(format!("checkpoint_{done:06}.lvck")))?;
        }
        last = Some(report);
    }
    let checkpoint = out_dir.join("model.lvck");
    trainer.model.save(&checkpoint)?;
    let final_psnr = trainer.heldout_psnr()?;
    Ok(TrainSummary {
        steps,
        initial_psnr,
        final_psnr,
        first_loss: first_loss.unwrap_or_default(),
        final_loss: last.map(|r| r.loss).unwrap_or_default(),
        checkpoint,
        log: log_path,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ArchVariant;

    fn tiny_config() -> TrainConfig {
        let model = ModelConfig { d1: 4, d2: 4, width: 8, d: 4, ff_expansion: 2, variant: ArchVariant::Variant2, ..ModelConfig::default() };
        let train = TrainParams { steps: 3, batch: 2, frames: 5, height: 16, width: 16, heldout: 2, ..TrainParams::default() };
        TrainConfig { model, train, ..TrainConfig::default() }
    }

    #[test]
    fn recon_loss_cases() {
        let corpus = SyntheticCorpus::new(1, 9, 16, 16);
        let x: Tensor<f64> = corpus.clip(0);
        let w = LossWeights::default();
        let (l, _) = recon_loss(&x, &Var::constant(x.clone()), &w).unwrap();
        assert_eq!(l.value().item(), 0.0);
        // constant offset: rgb term |c|; the image frame carries ll = 2c over a
        // quarter of its coefficients, each later frame lll = 2√2c over an eighth
        let c = 0.25;
        let (l, parts) = recon_loss(&x, &Var::constant(x.map(|v| v + c)), &w).unwrap();
        let t = 8.0;
        let freq = (0.5 + 2f64.sqrt() / 4.0 * t) / (1.0 + t) * c;
        assert!((parts.rgb - c).abs() < 1e-12);
        assert!((parts.frequency - freq).abs() < 1e-12, "{} vs {}", parts.frequency, freq);
        assert!((l.value().item() - c - freq).abs() < 1e-12);
        let none = LossWeights { rgb: false, frequency: false, ..w };
        assert!(recon_loss(&x, &Var::constant(x.clone()), &none).is_err());
    }

    #[test]
    fn adam_matches_scripted_single_parameter() {
        #[derive(Clone)]
        struct P(Tensor<f64>);
        impl Module<f64> for P {
            fn visit<'a>(&'a self, _: &str, f: &mut dyn FnMut(&str, &'a Tensor<f64>)) {
                f("p", &self.0)
            }
            fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
                f("p", &mut self.0)
            }
        }
        let mut p = P(Tensor::full(&[1], 1.0));
        let mut opt = Adam::new(&p);
        let (lr, b1, b2, eps) = (0.1, 0.5, 0.9, 1e-8);
        let (mut x, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for k in 1..=3 {
            // loss = x^2 + 3x
            let g = 2.0 * x + 3.0;
            let gt = Tensor::full(&[1], 2.0 * p.0.item() + 3.0);
            opt.update(&mut p, &[gt], lr).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let (mh, vh) = (m / (1.0 - b1.powi(k)), v / (1.0 - b2.powi(k)));
            x -= lr * mh / (vh.sqrt() + eps);
            assert!((p.0.item() - x).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule { base_lr: 1e-3, warmup: 10, total: 110, floor: 1e-5 };
        assert!((s.lr(0) - 1e-4).abs() < 1e-15);
        assert!((s.lr(9) - 1e-3).abs() < 1e-15);
        assert!((s.lr(10) - 1e-3).abs() < 1e-15);
        assert!((s.lr(60) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-12);
        assert!((s.lr(110) - 1e-5).abs() < 1e-15);
        assert!((s.lr(500) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::<f64>::full(&[4], 1.0), Tensor::full(&[5], 0.0)];
        let (n, c) = clip_global_norm(&mut g, 1.0);
        assert!((n - 2.0).abs() < 1e-12 && c);
        assert!((g[0].sq_norm() - 1.0).abs() < 1e-12);
        let (_, c) = clip_global_norm(&mut g, 10.0);
        assert!(!c);
    }

    #[test]
    fn corpus_is_deterministic_and_in_range() {
        let c = SyntheticCorpus::new(7, 5, 16, 24);
        let a: Tensor<f32> = c.clip(3);
        assert_eq!(a, c.clip(3));
        assert_ne!(a, c.clip::<f32>(4));
        assert_eq!(a.shape(), [5, 16, 24, 3]);
        assert!(a.max_abs() <= 1.0);
        // content moves over time
        assert_ne!(a.slice_axis0(0, 1).unwrap(), a.slice_axis0(4, 1).unwrap());
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut t = Trainer::<f32>::new(tiny_config()).unwrap();
        let before = t.model.clone();
        let batch = t.config.corpus().batch(0..2);
        let r = t.train_step_with_lr(&batch, 0.0).unwrap();
        assert!(r.loss.is_finite() && r.grad_norm > 0.0);
        assert_eq!(t.model, before);
        t.train_step_with_lr(&batch, 1e-3).unwrap();
        assert_ne!(t.model, before);
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let run = || {
            let mut t = Trainer::<f32>::new(tiny_config()).unwrap();
            (0..3).map(|_| t.train_step().unwrap().loss.total).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unbound_hooks_with_weight_fail() {
        let cfg = TrainConfig { loss: LossWeights { lambda_lpips: 4.0, ..LossWeights::default() }, ..tiny_config() };
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        assert!(matches!(t.train_step(), Err(Error::Parameter(_))));
        t.hooks.lpips = Some(Box::new(|xh: &Var<f32>, x: &Tensor<f32>| xh.l1_mean(x)));
        let r = t.train_step().unwrap();
        assert!(r.loss.lpips > 0.0);
    }

    #[test]
    fn run_training_writes_log_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.train.log_every = 1;
        cfg.train.eval_every = 2;
        cfg.train.checkpoint_every = 2;
        let s = run_training(&cfg, dir.path()).unwrap();
        assert!(s.checkpoint.exists());
        assert!(dir.path().join("checkpoint_000002.lvck").exists());
        let text = std::fs::read_to_string(&s.log).unwrap();
        let steps: Vec<u64> = text.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap()).collect();
        assert_eq!(steps, [1, 2, 3]);
        assert!(text.lines().nth(1).unwrap().contains("heldout_psnr"));
        let back = Model::<f32>::load(&s.checkpoint).unwrap();
        assert_eq!(back.config, cfg.model);
    }

    #[test]
    fn config_tables_parse() {
        let cfg = TrainConfig::from_toml("[model]\nD = 8\nd1 = 4\nd2 = 4\n[train]\nsteps = 7\n[loss]\nlambda_kl = 0.0\n").unwrap();
        assert_eq!(cfg.model.width, 8);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.batch, 4);
        assert_eq!(cfg.loss.lambda_kl, 0.0);
        assert!(TrainConfig::from_toml("[train]\nstepz = 1\n").is_err());
    }
}
