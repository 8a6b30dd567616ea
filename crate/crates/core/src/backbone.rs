//! NAF layers, stacks and the encoder/decoder trunks.

use crate::autograd::{Binder, Var};
use crate::error::{dim_err, Result};
use crate::nn::{join, Init, Module};
use crate::tensor::conv::next_cache;
use crate::tensor::{Element, Tensor};

/// Architecture variant of the trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchVariant {
    /// Haar patches, LC and HC projected then processed jointly.
    Variant1,
    /// Haar patches, LC and HC processed separately, then fused.
    #[default]
    Variant2,
    /// Raw RGB patches, one joint stream.
    Variant3,
}

/// Per-layer temporal caches for streaming inference.
///
/// Layers claim slots in the order they execute, so a fixed network visits
/// the same slots in the same order for every chunk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvCaches<E: Element> {
    slots: Vec<Option<Tensor<E>>>,
    cursor: usize,
}

impl<E: Element> ConvCaches<E> {
    pub fn new() -> Self {
        ConvCaches { slots: Vec::new(), cursor: 0 }
    }

    /// Starts a new chunk: layers will claim slots from the beginning again.
    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Cached slices per layer (`None` before the layer has run).
    pub fn slots(&self) -> &[Option<Tensor<E>>] {
        &self.slots
    }

    fn claim(&mut self) -> &mut Option<Tensor<E>> {
        if self.cursor == self.slots.len() {
            self.slots.push(None);
        }
        self.cursor += 1;
        &mut self.slots[self.cursor - 1]
    }
}

/// Forward-pass context: parameter binding plus optional streaming caches.
pub struct Ctx<'a, E: Element> {
    pub binder: &'a Binder<E>,
    pub caches: Option<&'a mut ConvCaches<E>>,
}

impl<'a, E: Element> Ctx<'a, E> {
    pub fn new(binder: &'a Binder<E>) -> Self {
        Ctx { binder, caches: None }
    }

    pub fn streaming(binder: &'a Binder<E>, caches: &'a mut ConvCaches<E>) -> Self {
        Ctx { binder, caches: Some(caches) }
    }
}

/// Causal depthwise conv, GELU, then a per-token two-layer feedforward.
#[derive(Debug, Clone, PartialEq)]
pub struct NafLayer<E: Element> {
    /// `[3, 3, 3, C]`
    pub kernel: Tensor<E>,
    pub conv_bias: Tensor<E>,
    /// `[C, eC]`
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    /// `[eC, C]`
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
    pub residual: bool,
}

/// Parameter count of one NAF layer.
pub fn naf_params(width: usize, expansion: usize) -> usize {
    2 * expansion * width * width + (29 + expansion) * width
}

impl<E: Element> NafLayer<E> {
    pub fn new(width: usize, expansion: usize, residual: bool, init: &mut Init) -> Self {
        let hidden = expansion * width;
        NafLayer {
            kernel: init.uniform(&[3, 3, 3, width], 27),
            conv_bias: Tensor::zeros(&[width]),
            w1: init.uniform(&[width, hidden], width),
            b1: Tensor::zeros(&[hidden]),
            w2: init.uniform(&[hidden, width], hidden),
            b2: Tensor::zeros(&[width]),
            residual,
        }
    }

    pub fn width(&self) -> usize {
        self.conv_bias.numel()
    }

    pub fn forward(&self, x: &Var<E>, ctx: &mut Ctx<'_, E>) -> Result<Var<E>> {
        if x.shape().len() != 4 || x.shape()[3] != self.width() {
            return Err(dim_err!("NAF layer of width {} applied to {:?}", self.width(), x.shape()));
        }
        let cache = match ctx.caches.as_deref_mut() {
            Some(c) => {
                let slot = c.claim();
                let prev = slot.take();
                *slot = Some(next_cache(x.value(), prev.as_ref())?);
                prev
            }
            None => None,
        };
        let b = ctx.binder;
        let h = x.dwconv3d_causal(&b.bind(&self.kernel), &b.bind(&self.conv_bias), cache.as_ref())?.gelu();
        let h = h.matmul(&b.bind(&self.w1))?.add_bias(&b.bind(&self.b1))?.gelu();
        let y = h.matmul(&b.bind(&self.w2))?.add_bias(&b.bind(&self.b2))?;
        if self.residual {
            x.add(&y)
        } else {
            Ok(y)
        }
    }
}

impl<E: Element> Module<E> for NafLayer<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<E>)) {
        f(&join(prefix, "kernel"), &self.kernel);
        f(&join(prefix, "conv_bias"), &self.conv_bias);
        f(&join(prefix, "w1"), &self.w1);
        f(&join(prefix, "b1"), &self.b1);
        f(&join(prefix, "w2"), &self.w2);
        f(&join(prefix, "b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "kernel"), &mut self.kernel);
        f(&join(prefix, "conv_bias"), &mut self.conv_bias);
        f(&join(prefix, "w1"), &mut self.w1);
        f(&join(prefix, "b1"), &mut self.b1);
        f(&join(prefix, "w2"), &mut self.w2);
        f(&join(prefix, "b2"), &mut self.b2);
    }
}

pub fn stack<E: Element>(depth: usize, width: usize, expansion: usize, residual: bool, init: &mut Init) -> Vec<NafLayer<E>> {
    (0..depth).map(|_| NafLayer::new(width, expansion, residual, init)).collect()
}

pub fn run_stack<E: Element>(layers: &[NafLayer<E>], x: &Var<E>, ctx: &mut Ctx<'_, E>) -> Result<Var<E>> {
    layers.iter().try_fold(x.clone(), |h, layer| layer.forward(&h, ctx))
}

/// Layer counts of a trunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrunkShape {
    /// Width of each input stream (LC then HC for split variants).
    pub widths: Vec<usize>,
    /// Per-stream layers before fusion.
    pub stream_depth: usize,
    /// Layers at the fused width.
    pub fuse_depth: usize,
    pub expansion: usize,
}

impl TrunkShape {
    pub fn fused_width(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn param_count(&self) -> usize {
        let e = self.expansion;
        self.widths.iter().map(|&w| self.stream_depth * naf_params(w, e)).sum::<usize>()
            + self.fuse_depth * naf_params(self.fused_width(), e)
    }
}

/// `p = fuse(cat(stream_0(p_0), stream_1(p_1), ...))`
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<E: Element> {
    pub streams: Vec<Vec<NafLayer<E>>>,
    pub fuse: Vec<NafLayer<E>>,
}

impl<E: Element> Encoder<E> {
    pub fn new(shape: &TrunkShape, init: &mut Init) -> Self {
        let streams = shape.widths.iter().map(|&w| stack(shape.stream_depth, w, shape.expansion, true, init)).collect();
        let fuse = stack(shape.fuse_depth, shape.fused_width(), shape.expansion, true, init);
        Encoder { streams, fuse }
    }

    pub fn forward(&self, inputs: &[Var<E>], ctx: &mut Ctx<'_, E>) -> Result<Var<E>> {
        if inputs.len() != self.streams.len() {
            return Err(dim_err!("encoder expects {} streams, got {}", self.streams.len(), inputs.len()));
        }
        let outs = inputs
            .iter()
            .zip(&self.streams)
            .map(|(x, layers)| run_stack(layers, x, ctx))
            .collect::<Result<Vec<_>>>()?;
        let p = if outs.len() == 1 { outs[0].clone() } else { Var::concat_last(&outs.iter().collect::<Vec<_>>())? };
        run_stack(&self.fuse, &p, ctx)
    }
}

/// Mirror of [`Encoder`]: fuse layers, channel split, per-stream layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<E: Element> {
    pub fuse: Vec<NafLayer<E>>,
    pub streams: Vec<Vec<NafLayer<E>>>,
    pub widths: Vec<usize>,
}

impl<E: Element> Decoder<E> {
    pub fn new(shape: &TrunkShape, init: &mut Init) -> Self {
        let fuse = stack(shape.fuse_depth, shape.fused_width(), shape.expansion, true, init);
        let streams = shape.widths.iter().map(|&w| stack(shape.stream_depth, w, shape.expansion, true, init)).collect();
        Decoder { fuse, streams, widths: shape.widths.clone() }
    }

    pub fn forward(&self, p: &Var<E>, ctx: &mut Ctx<'_, E>) -> Result<Vec<Var<E>>> {
        let total: usize = self.widths.iter().sum();
        if p.shape().last() != Some(&total) {
            return Err(dim_err!("decoder expects width {}, got {:?}", total, p.shape()));
        }
        let h = run_stack(&self.fuse, p, ctx)?;
        let mut start = 0;
        let mut outs = Vec::with_capacity(self.widths.len());
        for (&w, layers) in self.widths.iter().zip(&self.streams) {
            let part = if self.widths.len() == 1 { h.clone() } else { h.slice_last(start, w)? };
            outs.push(run_stack(layers, &part, ctx)?);
            start += w;
        }
        Ok(outs)
    }
}

impl<E: Element> Module<E> for Encoder<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<E>)) {
        self.streams.visit(&join(prefix, "streams"), f);
        self.fuse.visit(&join(prefix, "fuse"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.streams.visit_mut(&join(prefix, "streams"), f);
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
    }
}

impl<E: Element> Module<E> for Decoder<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<E>)) {
        self.fuse.visit(&join(prefix, "fuse"), f);
        self.streams.visit(&join(prefix, "streams"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
        self.streams.visit_mut(&join(prefix, "streams"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed<M: Module<f64>>(mut m: M) -> M {
        m.visit_mut("", &mut |_, t| *t = Tensor::zeros(t.shape()));
        m
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn param_formula_matches_layer() {
        for (c, e) in [(4, 2), (16, 4), (7, 3)] {
            let layer = NafLayer::<f32>::new(c, e, true, &mut Init::new(0));
            assert_eq!(layer.param_count(), naf_params(c, e));
        }
        assert_eq!(naf_params(512, 4), 2_114_048);
    }

    #[test]
    fn zero_layer_is_identity_when_residual() {
        let layer = zeroed(NafLayer::new(6, 2, true, &mut Init::new(1)));
        let x = Var::constant(randn(&[3, 4, 4, 6], 2));
        let b = Binder::inference();
        let y = layer.forward(&x, &mut Ctx::new(&b)).unwrap();
        assert_eq!(y.value(), x.value());
        let plain = NafLayer { residual: false, ..layer };
        assert_eq!(plain.forward(&x, &mut Ctx::new(&b)).unwrap().value().max_abs(), 0.0);
    }

    #[test]
    fn layer_matches_scripted_composition() {
        let layer = NafLayer::<f64>::new(3, 2, true, &mut Init::new(5));
        let x = randn(&[4, 3, 5, 3], 6);
        let b = Binder::inference();
        let y = layer.forward(&Var::constant(x.clone()), &mut Ctx::new(&b)).unwrap();
        let conv = crate::tensor::conv::dwconv3d_causal(&x, &layer.kernel, &layer.conv_bias, None).unwrap();
        let h = crate::autograd::gelu(&conv);
        let h = crate::autograd::gelu(&h.matmul_lastdim(&layer.w1).unwrap().add_bias(&layer.b1).unwrap());
        let want = x.add(&h.matmul_lastdim(&layer.w2).unwrap().add_bias(&layer.b2).unwrap()).unwrap();
        assert!(y.value().max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn layer_is_causal() {
        let layer = NafLayer::<f64>::new(4, 2, true, &mut Init::new(7));
        let x = randn(&[6, 3, 3, 4], 8);
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[4 * 9 * 4..] {
            *v += 0.7;
        }
        let b = Binder::inference();
        let y1 = layer.forward(&Var::constant(x), &mut Ctx::new(&b)).unwrap();
        let y2 = layer.forward(&Var::constant(x2), &mut Ctx::new(&b)).unwrap();
        assert_eq!(y1.value().slice_axis0(0, 4).unwrap(), y2.value().slice_axis0(0, 4).unwrap());
        assert_ne!(y1.value().slice_axis0(4, 2).unwrap(), y2.value().slice_axis0(4, 2).unwrap());
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let layer = NafLayer::<f64>::new(4, 2, true, &mut Init::new(7));
        let b = Binder::inference();
        let r = layer.forward(&Var::constant(Tensor::zeros(&[2, 2, 2, 5])), &mut Ctx::new(&b));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    fn small_shape() -> TrunkShape {
        TrunkShape { widths: vec![5, 3], stream_depth: 2, fuse_depth: 4, expansion: 2 }
    }

    #[test]
    fn zero_trunks_pass_streams_through() {
        let shape = small_shape();
        let enc = zeroed(Encoder::new(&shape, &mut Init::new(0)));
        let dec = zeroed(Decoder::new(&shape, &mut Init::new(0)));
        let lc = Var::constant(randn(&[3, 2, 2, 5], 1));
        let hc = Var::constant(randn(&[3, 2, 2, 3], 2));
        let b = Binder::inference();
        let p = enc.forward(&[lc.clone(), hc.clone()], &mut Ctx::new(&b)).unwrap();
        assert_eq!(p.value(), &Tensor::concat_last(&[lc.value(), hc.value()]).unwrap());
        let outs = dec.forward(&p, &mut Ctx::new(&b)).unwrap();
        assert_eq!(outs[0].value(), lc.value());
        assert_eq!(outs[1].value(), hc.value());
        assert_eq!(enc.param_count(), shape.param_count());
        assert_eq!(dec.param_count(), shape.param_count());
    }

    #[test]
    fn default_trunk_shapes() {
        let shape = TrunkShape { widths: vec![384, 128], stream_depth: 2, fuse_depth: 4, expansion: 4 };
        assert_eq!(shape.param_count(), 11_111_424);
    }

    #[test]
    fn streaming_caches_reproduce_full_pass() {
        let shape = small_shape();
        let enc = Encoder::<f64>::new(&shape, &mut Init::new(3));
        let lc = randn(&[5, 2, 3, 5], 4);
        let hc = randn(&[5, 2, 3, 3], 5);
        let b = Binder::inference();
        let full = enc
            .forward(&[Var::constant(lc.clone()), Var::constant(hc.clone())], &mut Ctx::new(&b))
            .unwrap();
        let mut caches = ConvCaches::new();
        let mut parts = Vec::new();
        for (start, len) in [(0, 2), (2, 1), (3, 2)] {
            caches.rewind();
            let mut ctx = Ctx::streaming(&b, &mut caches);
            let ins = [Var::constant(lc.slice_axis0(start, len).unwrap()), Var::constant(hc.slice_axis0(start, len).unwrap())];
            parts.push(enc.forward(&ins, &mut ctx).unwrap().value().clone());
        }
        assert_eq!(caches.len(), 2 * 2 + 4);
        let streamed = Tensor::concat_axis0(&parts.iter().collect::<Vec<_>>()).unwrap();
        assert!(streamed.max_abs_diff(full.value()).unwrap() < 1e-12);
    }
}
