//! Full autoencoder: patchify, encoder trunk, sensing; recovery, decoder
//! trunk, unpatchify. Also configuration and checkpoints.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Binder, Var};
use crate::backbone::{ArchVariant, Ctx, Decoder, Encoder, TrunkShape};
use crate::bottleneck::{bottleneck_params, Bottleneck, BottleneckKind, Latent};
use crate::error::{dim_err, Error, Result};
use crate::nn::{Init, Module};
use crate::patchifier::{Grid, PatchKind, Patchifier, C_S, C_T};
use crate::tensor::{read_ntsr_as, write_ntsr, DType, Element, Tensor};

fn default_c_s() -> usize {
    C_S
}
fn default_c_t() -> usize {
    C_T
}
fn default_d1() -> usize {
    128
}
fn default_d2() -> usize {
    384
}
fn default_width() -> usize {
    512
}
fn default_latent() -> usize {
    4
}
fn default_stages() -> usize {
    2
}
fn default_expansion() -> usize {
    4
}

/// Model hyperparameters. Field names double as TOML keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_c_s")]
    pub c_s: usize,
    #[serde(default = "default_c_t")]
    pub c_t: usize,
    /// HC stream width.
    #[serde(default = "default_d1")]
    pub d1: usize,
    /// LC stream width.
    #[serde(default = "default_d2")]
    pub d2: usize,
    /// Fused width, `d1 + d2`.
    #[serde(rename = "D", default = "default_width")]
    pub width: usize,
    /// Latent channels.
    #[serde(default = "default_latent")]
    pub d: usize,
    /// Recovery stages.
    #[serde(rename = "K", default = "default_stages")]
    pub stages: usize,
    #[serde(default = "default_expansion")]
    pub ff_expansion: usize,
    #[serde(default)]
    pub variant: ArchVariant,
    #[serde(default)]
    pub patch_norm: bool,
    #[serde(default)]
    pub bottleneck: BottleneckKind,
    /// Depth of the single joint trunk of variants 1 and 3; chosen to match
    /// the variant-2 parameter count when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_depth: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c_s: C_S,
            c_t: C_T,
            d1: default_d1(),
            d2: default_d2(),
            width: default_width(),
            d: default_latent(),
            stages: default_stages(),
            ff_expansion: default_expansion(),
            variant: ArchVariant::Variant2,
            patch_norm: false,
            bottleneck: BottleneckKind::Cs,
            joint_depth: None,
            seed: 0,
        }
    }
}

/// Parameter totals per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub patchify: usize,
    pub unpatchify: usize,
    pub encoder: usize,
    pub bottleneck: usize,
    pub decoder: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.patchify + self.unpatchify + self.encoder + self.bottleneck + self.decoder
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.c_s != C_S || self.c_t != C_T {
            return bad(format!("only c_s = {C_S}, c_t = {C_T} are supported, got {}, {}", self.c_s, self.c_t));
        }
        if self.d1 == 0 || self.d2 == 0 || self.d1 + self.d2 != self.width {
            return bad(format!("need d1 + d2 == D with both positive, got {} + {} vs {}", self.d1, self.d2, self.width));
        }
        if self.d == 0 || self.ff_expansion == 0 {
            return bad("latent channels and ff_expansion must be positive".into());
        }
        if self.joint_depth == Some(0) {
            return bad("joint_depth must be positive".into());
        }
        Ok(())
    }

    pub fn patch_kind(&self) -> PatchKind {
        match self.variant {
            ArchVariant::Variant3 => PatchKind::Rgb,
            _ => PatchKind::Haar,
        }
    }

    pub fn stream_widths(&self) -> Vec<usize> {
        match self.patch_kind() {
            PatchKind::Haar => vec![self.d2, self.d1],
            PatchKind::Rgb => vec![self.width],
        }
    }

    /// Trunk layout; variants 1 and 3 use `joint_depth` layers at width `D`.
    pub fn trunk(&self) -> TrunkShape {
        let e = self.ff_expansion;
        match self.variant {
            ArchVariant::Variant2 => TrunkShape { widths: self.stream_widths(), stream_depth: 2, fuse_depth: 4, expansion: e },
            _ => TrunkShape {
                widths: self.stream_widths(),
                stream_depth: 0,
                fuse_depth: self.joint_depth.unwrap_or_else(|| self.matched_joint_depth()),
                expansion: e,
            },
        }
    }

    /// Joint depth whose total parameter count is closest to variant 2.
    pub fn matched_joint_depth(&self) -> usize {
        let target = ModelConfig { variant: ArchVariant::Variant2, ..self.clone() }.param_breakdown().total() as i64;
        (1..=64)
            .min_by_key(|&j| {
                let cfg = ModelConfig { joint_depth: Some(j), ..self.clone() };
                (cfg.param_breakdown().total() as i64 - target).abs()
            })
            .expect("non-empty range")
    }

    /// Exact analytic parameter counts.
    pub fn param_breakdown(&self) -> ParamBreakdown {
        let kind = self.patch_kind();
        let widths = self.stream_widths();
        let dims: Vec<usize> = kind.image_dims().iter().chain(kind.video_dims()).copied().collect();
        let stream_of = |i: usize| widths[i % widths.len()];
        let patchify = dims.iter().enumerate().map(|(i, &d)| (d + 1) * stream_of(i)).sum::<usize>()
            + if self.patch_norm { 2 * dims.iter().sum::<usize>() } else { 0 };
        let unpatchify = dims.iter().enumerate().map(|(i, &d)| (stream_of(i) + 1) * d).sum();
        let trunk = self.trunk().param_count();
        ParamBreakdown {
            patchify,
            unpatchify,
            encoder: trunk,
            bottleneck: bottleneck_params(self.bottleneck, self.width, self.d, self.stages, self.ff_expansion),
            decoder: trunk,
        }
    }

    /// Latent grid shape for a clip of the given `[F, H, W, 3]` shape.
    pub fn latent_shape(&self, video_shape: &[usize]) -> Result<[usize; 4]> {
        let g = Grid::for_video(video_shape, true)?;
        Ok([g.rows(), g.h, g.w, self.d])
    }
}

/// Latent tensors produced by inference-mode encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<E: Element> {
    pub z: Tensor<E>,
    pub mu: Tensor<E>,
    pub logvar: Tensor<E>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<E: Element> {
    pub config: ModelConfig,
    pub patchifier: Patchifier<E>,
    pub encoder: Encoder<E>,
    pub bottleneck: Bottleneck<E>,
    pub decoder: Decoder<E>,
}

/// `0.5 * mean(mu^2 + exp(logvar) - 1 - logvar)`.
pub fn kl_term<E: Element>(mu: &Var<E>, logvar: &Var<E>) -> Result<Var<E>> {
    Ok(mu.square().add(&logvar.exp())?.sub(logvar)?.add_scalar(-E::one()).mean().scale(E::lit(0.5)))
}

/// Checks an RGB clip is `[1 + 4k, 8m, 8n, 3]` with finite values in `[-1, 1]`.
pub fn validate_video<E: Element>(video: &Tensor<E>) -> Result<Grid> {
    validate_clip(video, true)
}

/// Like [`validate_video`]; without `lead` the clip is `[4k, 8m, 8n, 3]`.
pub fn validate_clip<E: Element>(video: &Tensor<E>, lead: bool) -> Result<Grid> {
    let grid = Grid::for_video(video.shape(), lead).map_err(|e| Error::Input(e.to_string()))?;
    if let Some(v) = video.data().iter().find(|v| !(v.abs() <= E::one())) {
        return Err(Error::Input(format!("pixel value {:?} outside [-1, 1]", v)));
    }
    Ok(grid)
}

impl<E: Element> Model<E> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(config.seed);
        let trunk = config.trunk();
        let patchifier = Patchifier::new(config.patch_kind(), &config.stream_widths(), config.patch_norm, &mut init)?;
        let encoder = Encoder::new(&trunk, &mut init);
        let bottleneck = Bottleneck::new(config.bottleneck, config.width, config.d, config.stages, config.ff_expansion, &mut init);
        let decoder = Decoder::new(&trunk, &mut init);
        Ok(Model { config, patchifier, encoder, bottleneck, decoder })
    }

    /// Number of scalar parameters, enumerated from the live tensors.
    pub fn param_count(&self) -> usize {
        Module::param_count(self)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _| names.push(n.to_string()));
        names
    }

    /// Differentiable encoder. `lead` marks a chunk whose first frame is the
    /// image frame; `noise` enables reparameterized sampling.
    pub fn encode_var(
        &self,
        video: &Tensor<E>,
        lead: bool,
        ctx: &mut Ctx<'_, E>,
        noise: Option<&mut dyn rand::RngCore>,
    ) -> Result<Latent<E>> {
        let streams = self.patchifier.patchify(video, lead, ctx.binder)?;
        let p = self.encoder.forward(&streams, ctx)?;
        self.bottleneck.sense(&p, ctx, noise)
    }

    /// Differentiable decoder from latent rows to frames.
    pub fn decode_var(&self, z: &Var<E>, lead: bool, ctx: &mut Ctx<'_, E>) -> Result<Var<E>> {
        let p = self.bottleneck.recover(z, ctx)?;
        let streams = self.decoder.forward(&p, ctx)?;
        self.patchifier.unpatchify(&streams, lead, ctx.binder)
    }

    /// Deterministic encoding (`z == mu`).
    pub fn encode(&self, video: &Tensor<E>) -> Result<LatentGrid<E>> {
        validate_video(video)?;
        let binder = Binder::inference();
        let lat = self.encode_var(video, true, &mut Ctx::new(&binder), None)?;
        Ok(LatentGrid { z: lat.z.value().clone(), mu: lat.mu.value().clone(), logvar: lat.logvar.value().clone() })
    }

    pub fn decode(&self, z: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_latent(z)?;
        let binder = Binder::inference();
        Ok(self.decode_var(&Var::constant(z.clone()), true, &mut Ctx::new(&binder))?.value().clone())
    }

    pub(crate) fn check_latent(&self, z: &Tensor<E>) -> Result<()> {
        let s = z.shape();
        if s.len() != 4 || s.contains(&0) || s[3] != self.config.d {
            return Err(dim_err!("latent must be [T, H, W, {}], got {:?}", self.config.d, s));
        }
        Ok(())
    }

    pub fn cast<F: Element>(&self) -> Model<F> {
        let mut out = Model::<F>::new(self.config.clone()).expect("config already validated");
        let mut src = Vec::new();
        self.visit("", &mut |_, t| src.push(t.cast::<F>()));
        let mut it = src.into_iter();
        out.visit_mut("", &mut |_, t| *t = it.next().expect("same structure"));
        out
    }
}

impl<E: Element> Module<E> for Model<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<E>)) {
        let p = |s: &str| crate::nn::join(prefix, s);
        self.patchifier.visit(&p("patchifier"), f);
        self.encoder.visit(&p("encoder"), f);
        self.bottleneck.visit(&p("bottleneck"), f);
        self.decoder.visit(&p("decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        let p = |s: &str| crate::nn::join(prefix, s);
        self.patchifier.visit_mut(&p("patchifier"), f);
        self.encoder.visit_mut(&p("encoder"), f);
        self.bottleneck.visit_mut(&p("bottleneck"), f);
        self.decoder.visit_mut(&p("decoder"), f);
    }
}

// ---- checkpoints ---------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LVCK";
pub const CHECKPOINT_VERSION: u8 = 1;
const CHECKPOINT_HEADER: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// Byte offset of the entry's NTSR record, relative to the blob section.
    pub offset: u64,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

/// JSON header of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub dtype: DType,
    pub param_count: usize,
    pub entries: Vec<ManifestEntry>,
}

impl<E: Element> Model<E> {
    /// Layout: `LVCK`, u8 version, 3 reserved bytes, u64 LE manifest length,
    /// JSON manifest, then one NTSR record per parameter.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut blobs = Vec::new();
        let mut entries = Vec::new();
        self.visit("", &mut |name, t| {
            entries.push(ManifestEntry { name: name.to_string(), offset: blobs.len() as u64, shape: t.shape().to_vec(), dtype: E::DTYPE });
            write_ntsr(t, &mut blobs);
        });
        let manifest = Manifest { config: self.config.clone(), dtype: E::DTYPE, param_count: self.param_count(), entries };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(CHECKPOINT_HEADER + json.len() + blobs.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&[0; 3]);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, blobs) = parse_manifest(bytes)?;
        let mut model = Model::<E>::new(manifest.config.clone())?;
        let by_name: HashMap<&str, &ManifestEntry> = manifest.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        if by_name.len() != manifest.entries.len() {
            return Err(Error::Format("checkpoint manifest repeats a parameter name".into()));
        }
        let mut used = 0usize;
        let mut end = 0usize;
        let mut failure: Option<Error> = None;
        model.visit_mut("", &mut |name, t| {
            if failure.is_some() {
                return;
            }
            let result = (|| -> Result<()> {
                let entry = by_name
                    .get(name)
                    .ok_or_else(|| Error::Version(format!("checkpoint lacks parameter {name}")))?;
                if entry.shape != t.shape() {
                    return Err(Error::Version(format!("{name}: stored {:?}, config expects {:?}", entry.shape, t.shape())));
                }
                let offset = usize::try_from(entry.offset).map_err(|_| Error::Format("offset overflow".into()))?;
                let record = blobs
                    .get(offset..)
                    .ok_or_else(|| Error::Integrity(format!("{name}: offset {offset} past end of file")))?;
                let (value, n) = read_ntsr_as::<E>(record)?;
                if record.get(5) != Some(&entry.dtype.code()) {
                    return Err(Error::Integrity(format!("{name}: record dtype disagrees with manifest")));
                }
                if value.shape() != t.shape() {
                    return Err(Error::Integrity(format!("{name}: record shape {:?} disagrees with manifest", value.shape())));
                }
                *t = value;
                used += 1;
                end = end.max(offset + n);
                Ok(())
            })();
            if let Err(e) = result {
                failure = Some(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if used != manifest.entries.len() {
            return Err(Error::Version(format!(
                "checkpoint holds {} parameters, config defines {}",
                manifest.entries.len(),
                used
            )));
        }
        if end != blobs.len() {
            return Err(Error::Integrity(format!("{} unexpected trailing bytes", blobs.len() - end)));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Loads a checkpoint and requires its configuration to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if &model.config != expected {
            return Err(Error::Version(format!(
                "checkpoint config {:?} differs from expected {:?}",
                model.config, expected
            )));
        }
        Ok(model)
    }
}


/// Splits a checkpoint into its manifest and blob section.
pub fn parse_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < CHECKPOINT_HEADER {
        return Err(Error::Integrity(format!("checkpoint header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::Version(format!("checkpoint version {} unsupported", bytes[4])));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let json_end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(CHECKPOINT_HEADER))
        .ok_or_else(|| Error::Format("manifest length overflow".into()))?;
    if bytes.len() < json_end {
        return Err(Error::Integrity("checkpoint manifest truncated".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[CHECKPOINT_HEADER..json_end])
        .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    Ok((manifest, &bytes[json_end..]))
}
