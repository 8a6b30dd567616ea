//! Frequency-domain patchify / unpatchify.
//!
//! Videos are channels-last `[F, H, W, 3]`. A clip with a lead frame has
//! `F = 1 + T`: frame 0 goes through `dwt2` and 4x4 patches, frames `1..`
//! through `dwt3` and 2x4x4 patches. Streaming chunks after the first have
//! no lead frame and consist of video patches only.
//!
//! Inside a patch, values are flattened channel-slowest:
//! `index = c * (pt * ps * ps) + t * ps * ps + h * ps + w`.

use crate::autograd::{Binder, Var};
use crate::error::{dim_err, Result};
use crate::nn::{join, Init, LayerNorm, Linear, Module};
use crate::tensor::{Element, Tensor};
use crate::wavelet::{dwt2, dwt3, idwt2, idwt3, SubbandSet2D, SubbandSet3D};

/// Temporal compression of frames after the first.
pub const C_T: usize = 4;
/// Spatial compression.
pub const C_S: usize = 8;

/// How raw pixels become patch vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchKind {
    /// Haar subbands split into a low-frequency and a high-frequency group.
    Haar,
    /// Raw RGB values, one group.
    Rgb,
}

impl PatchKind {
    /// Raw vector length of each image-path group.
    pub fn image_dims(self) -> &'static [usize] {
        match self {
            PatchKind::Haar => &[48, 144],
            PatchKind::Rgb => &[192],
        }
    }

    /// Raw vector length of each video-path group.
    pub fn video_dims(self) -> &'static [usize] {
        match self {
            PatchKind::Haar => &[96, 672],
            PatchKind::Rgb => &[768],
        }
    }

    pub fn groups(self) -> usize {
        self.image_dims().len()
    }
}

/// Token-grid extents for a clip or chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    /// Whether token row 0 is an image (lead-frame) row.
    pub lead: bool,
    /// Number of 4-frame video rows.
    pub video_rows: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn for_video(shape: &[usize], lead: bool) -> Result<Grid> {
        let &[f, h, w, c] = shape else {
            return Err(dim_err!("video must be [F, H, W, 3], got {:?}", shape));
        };
        if c != 3 {
            return Err(dim_err!("video must have 3 channels, got {}", c));
        }
        if h == 0 || w == 0 || h % C_S != 0 || w % C_S != 0 {
            return Err(dim_err!("frame size {}x{} is not a positive multiple of {}", h, w, C_S));
        }
        let body = if lead { f.checked_sub(1) } else { Some(f) };
        match body {
            Some(t) if t % C_T == 0 && (lead || t > 0) => {
                Ok(Grid { lead, video_rows: t / C_T, h: h / C_S, w: w / C_S })
            }
            _ => Err(dim_err!(
                "{} frames is not {}a multiple of {}",
                f,
                if lead { "one plus " } else { "a positive " },
                C_T
            )),
        }
    }

    pub fn for_tokens(shape: &[usize], lead: bool) -> Result<Grid> {
        let &[rows, h, w, _] = shape else {
            return Err(dim_err!("token grid must be [T, H, W, C], got {:?}", shape));
        };
        if rows == 0 || h == 0 || w == 0 {
            return Err(dim_err!("empty token grid {:?}", shape));
        }
        Ok(Grid { lead, video_rows: rows - lead as usize, h, w })
    }

    pub fn rows(&self) -> usize {
        self.video_rows + self.lead as usize
    }

    pub fn frames(&self) -> usize {
        self.video_rows * C_T + self.lead as usize
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [self.frames(), self.h * C_S, self.w * C_S, 3]
    }
}

/// Raw (unprojected) patch vectors, one tensor per group and path.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPatches<E: Element> {
    /// Present iff the grid has a lead frame; each `[1, H', W', dim]`.
    pub image: Option<Vec<Tensor<E>>>,
    /// Present iff there are video rows; each `[T', H', W', dim]`.
    pub video: Option<Vec<Tensor<E>>>,
}

impl<E: Element> RawPatches<E> {
    /// All groups in order (image groups first), flattened and concatenated.
    pub fn flatten(&self) -> Tensor<E> {
        let parts: Vec<&Tensor<E>> = self.image.iter().chain(self.video.iter()).flatten().collect();
        let data: Vec<E> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
        let n = data.len();
        Tensor::from_parts(vec![n], data)
    }

    /// Inverse of [`RawPatches::flatten`] for a known grid.
    pub fn unflatten(flat: &Tensor<E>, kind: PatchKind, grid: Grid) -> Result<Self> {
        let mut offset = 0;
        let mut take = |rows: usize, dims: &[usize]| -> Result<Vec<Tensor<E>>> {
            dims.iter()
                .map(|&d| {
                    let n = rows * grid.h * grid.w * d;
                    let data = flat.data().get(offset..offset + n).ok_or_else(|| dim_err!("flat patches too short"))?;
                    offset += n;
                    Tensor::new(&[rows, grid.h, grid.w, d], data.to_vec())
                })
                .collect()
        };
        let image = if grid.lead { Some(take(1, kind.image_dims())?) } else { None };
        let video = if grid.video_rows > 0 { Some(take(grid.video_rows, kind.video_dims())?) } else { None };
        if offset != flat.numel() {
            return Err(dim_err!("flat patches have {} values, grid needs {}", flat.numel(), offset));
        }
        Ok(RawPatches { image, video })
    }
}

/// `[C, T, H, W]` volume to `[T/pt, H/ps, W/ps, C*pt*ps*ps]` tokens.
fn to_patches<E: Element>(vol: &Tensor<E>, pt: usize, ps: usize) -> Tensor<E> {
    let s = vol.shape();
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let (gt, gh, gw) = (t / pt, h / ps, w / ps);
    let dim = c * pt * ps * ps;
    let src = vol.data();
    let mut out = vec![E::zero(); vol.numel()];
    for ti in 0..gt {
        for hi in 0..gh {
            for wi in 0..gw {
                let base = ((ti * gh + hi) * gw + wi) * dim;
                let mut k = base;
                for ci in 0..c {
                    for dt in 0..pt {
                        for dh in 0..ps {
                            let row = ((ci * t + ti * pt + dt) * h + hi * ps + dh) * w + wi * ps;
                            out[k..k + ps].copy_from_slice(&src[row..row + ps]);
                            k += ps;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![gt, gh, gw, dim], out)
}

/// Inverse of [`to_patches`].
fn from_patches<E: Element>(tokens: &Tensor<E>, c: usize, pt: usize, ps: usize) -> Tensor<E> {
    let s = tokens.shape();
    let (gt, gh, gw, dim) = (s[0], s[1], s[2], s[3]);
    debug_assert_eq!(dim, c * pt * ps * ps);
    let (t, h, w) = (gt * pt, gh * ps, gw * ps);
    let src = tokens.data();
    let mut out = vec![E::zero(); tokens.numel()];
    for ti in 0..gt {
        for hi in 0..gh {
            for wi in 0..gw {
                let mut k = ((ti * gh + hi) * gw + wi) * dim;
                for ci in 0..c {
                    for dt in 0..pt {
                        for dh in 0..ps {
                            let row = ((ci * t + ti * pt + dt) * h + hi * ps + dh) * w + wi * ps;
                            out[row..row + ps].copy_from_slice(&src[k..k + ps]);
                            k += ps;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![c, t, h, w], out)
}

/// Channels-last frames `[F, H, W, 3]` to a channel-first volume `[3, F, H, W]`.
fn channels_first<E: Element>(frames: &Tensor<E>) -> Result<Tensor<E>> {
    frames.permute(&[3, 0, 1, 2])
}

fn channels_last<E: Element>(vol: &Tensor<E>) -> Result<Tensor<E>> {
    vol.permute(&[1, 2, 3, 0])
}

/// Splits a video into raw patch groups.
pub fn analyze<E: Element>(kind: PatchKind, video: &Tensor<E>, lead: bool) -> Result<RawPatches<E>> {
    let grid = Grid::for_video(video.shape(), lead)?;
    let image = if lead {
        let frame = channels_first(&video.slice_axis0(0, 1)?)?;
        Some(match kind {
            PatchKind::Haar => {
                let [_, _, h, w] = <[usize; 4]>::try_from(frame.shape()).expect("rank 4");
                let s = dwt2(&frame.reshape(&[3, h, w])?)?;
                let (h2, w2) = (h / 2, w / 2);
                vec![
                    to_patches(&s.ll.reshape(&[3, 1, h2, w2])?, 1, 4),
                    to_patches(&s.high.reshape(&[9, 1, h2, w2])?, 1, 4),
                ]
            }
            PatchKind::Rgb => vec![to_patches(&frame, 1, C_S)],
        })
    } else {
        None
    };
    let video = if grid.video_rows > 0 {
        let body = channels_first(&video.slice_axis0(lead as usize, grid.video_rows * C_T)?)?;
        Some(match kind {
            PatchKind::Haar => {
                let s = dwt3(&body)?;
                vec![to_patches(&s.lll, 2, 4), to_patches(&s.high, 2, 4)]
            }
            PatchKind::Rgb => vec![to_patches(&body, C_T, C_S)],
        })
    } else {
        None
    };
    Ok(RawPatches { image, video })
}

fn check_groups<E: Element>(groups: &[Tensor<E>], dims: &[usize], rows: Option<usize>) -> Result<[usize; 3]> {
    if groups.len() != dims.len() {
        return Err(dim_err!("expected {} patch groups, got {}", dims.len(), groups.len()));
    }
    let s0 = groups[0].shape();
    for (g, &d) in groups.iter().zip(dims) {
        let s = g.shape();
        if s.len() != 4 || s[..3] != s0[..3] || s[3] != d || rows.is_some_and(|r| r != s[0]) {
            return Err(dim_err!("patch group {:?} inconsistent (expected width {})", s, d));
        }
    }
    Ok([s0[0], s0[1], s0[2]])
}

/// Reassembles a video from raw patch groups; exact inverse of [`analyze`].
pub fn synthesize<E: Element>(kind: PatchKind, raw: &RawPatches<E>) -> Result<Tensor<E>> {
    let mut frames: Vec<Tensor<E>> = Vec::new();
    let mut extent: Option<[usize; 2]> = None;
    if let Some(groups) = &raw.image {
        let [_, gh, gw] = check_groups(groups, kind.image_dims(), Some(1))?;
        extent = Some([gh, gw]);
        let vol = match kind {
            PatchKind::Haar => {
                let ll = from_patches(&groups[0], 3, 1, 4);
                let high = from_patches(&groups[1], 9, 1, 4);
                let (h2, w2) = (gh * 4, gw * 4);
                let img = idwt2(&SubbandSet2D { ll: ll.reshape(&[3, h2, w2])?, high: high.reshape(&[9, h2, w2])? })?;
                img.reshape(&[3, 1, 2 * h2, 2 * w2])?
            }
            PatchKind::Rgb => from_patches(&groups[0], 3, 1, C_S),
        };
        frames.push(channels_last(&vol)?);
    }
    if let Some(groups) = &raw.video {
        let [_, gh, gw] = check_groups(groups, kind.video_dims(), None)?;
        if extent.is_some_and(|e| e != [gh, gw]) {
            return Err(dim_err!("image and video patch grids differ"));
        }
        let vol = match kind {
            PatchKind::Haar => idwt3(&SubbandSet3D {
                lll: from_patches(&groups[0], 3, 2, 4),
                high: from_patches(&groups[1], 21, 2, 4),
            })?,
            PatchKind::Rgb => from_patches(&groups[0], 3, C_T, C_S),
        };
        frames.push(channels_last(&vol)?);
    }
    if frames.is_empty() {
        return Err(dim_err!("no patch groups to synthesize"));
    }
    Tensor::concat_axis0(&frames.iter().collect::<Vec<_>>())
}

/// Differentiable [`synthesize`]; since the transform is orthonormal its
/// adjoint is [`analyze`].
pub fn synthesize_var<E: Element>(
    kind: PatchKind,
    image: Option<Vec<Var<E>>>,
    video: Option<Vec<Var<E>>>,
) -> Result<Var<E>> {
    let n_image = image.as_ref().map_or(0, Vec::len);
    let lead = image.is_some();
    let inputs: Vec<Var<E>> = image.into_iter().chain(video).flatten().collect();
    let refs: Vec<&Var<E>> = inputs.iter().collect();
    Var::linear_map(
        &refs,
        |vals| {
            let (im, vi) = vals.split_at(n_image);
            let raw = RawPatches {
                image: lead.then(|| im.iter().map(|&t| t.clone()).collect()),
                video: (!vi.is_empty()).then(|| vi.iter().map(|&t| t.clone()).collect()),
            };
            synthesize(kind, &raw)
        },
        move |g| {
            let raw = analyze(kind, g, lead)?;
            Ok(raw.image.into_iter().chain(raw.video).flatten().collect())
        },
    )
}

/// Differentiable [`analyze`] flattened to one vector (adjoint: [`synthesize`]).
pub fn analyze_flat_var<E: Element>(kind: PatchKind, video: &Var<E>, lead: bool) -> Result<Var<E>> {
    let grid = Grid::for_video(video.shape(), lead)?;
    Var::linear_map(
        &[video],
        |v| Ok(analyze(kind, v[0], lead)?.flatten()),
        move |g| Ok(vec![synthesize(kind, &RawPatches::unflatten(g, kind, grid)?)?]),
    )
}

/// Learned projections between raw patch groups and token streams.
///
/// Stream `i` is fed by group `i` of both the image and the video path; the
/// two paths have separate weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Patchifier<E: Element> {
    pub kind: PatchKind,
    pub fwd_image: Vec<Linear<E>>,
    pub fwd_video: Vec<Linear<E>>,
    pub inv_image: Vec<Linear<E>>,
    pub inv_video: Vec<Linear<E>>,
    /// Per-group layer norms on raw patches (ablation only).
    pub norm_image: Option<Vec<LayerNorm<E>>>,
    pub norm_video: Option<Vec<LayerNorm<E>>>,
}

impl<E: Element> Patchifier<E> {
    pub fn new(kind: PatchKind, widths: &[usize], patch_norm: bool, init: &mut Init) -> Result<Self> {
        if widths.len() != kind.groups() {
            return Err(dim_err!("{:?} patches feed {} streams, got widths {:?}", kind, kind.groups(), widths));
        }
        let build = |dims: &[usize], init: &mut Init, inverse: bool| -> Vec<Linear<E>> {
            dims.iter()
                .zip(widths)
                .map(|(&d, &w)| if inverse { Linear::new(w, d, init) } else { Linear::new(d, w, init) })
                .collect()
        };
        let norms = |dims: &[usize]| patch_norm.then(|| dims.iter().map(|&d| LayerNorm::new(d)).collect());
        Ok(Patchifier {
            kind,
            fwd_image: build(kind.image_dims(), init, false),
            fwd_video: build(kind.video_dims(), init, false),
            inv_image: build(kind.image_dims(), init, true),
            inv_video: build(kind.video_dims(), init, true),
            norm_image: norms(kind.image_dims()),
            norm_video: norms(kind.video_dims()),
        })
    }

    /// Token widths of the streams.
    pub fn widths(&self) -> Vec<usize> {
        self.fwd_image.iter().map(Linear::output_dim).collect()
    }

    /// Projects raw patches to one token grid per stream.
    pub fn embed(&self, raw: &RawPatches<E>, binder: &Binder<E>) -> Result<Vec<Var<E>>> {
        let project = |groups: &[Tensor<E>], lin: &[Linear<E>], norm: Option<&Vec<LayerNorm<E>>>| -> Result<Vec<Var<E>>> {
            check_groups(groups, &lin.iter().map(Linear::input_dim).collect::<Vec<_>>(), None)?;
            groups
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let mut x = Var::constant(g.clone());
                    if let Some(norms) = norm {
                        x = norms[i].forward(&x, binder)?;
                    }
                    lin[i].forward(&x, binder)
                })
                .collect()
        };
        let image = raw.image.as_deref().map(|g| project(g, &self.fwd_image, self.norm_image.as_ref())).transpose()?;
        let video = raw.video.as_deref().map(|g| project(g, &self.fwd_video, self.norm_video.as_ref())).transpose()?;
        (0..self.kind.groups())
            .map(|s| {
                let parts: Vec<&Var<E>> = image.iter().chain(video.iter()).map(|v| &v[s]).collect();
                if parts.len() == 1 {
                    Ok(parts[0].clone())
                } else {
                    Var::concat_axis0(&parts)
                }
            })
            .collect()
    }

    /// Patchify a video (or lead-less chunk) into per-stream token grids.
    pub fn patchify(&self, video: &Tensor<E>, lead: bool, binder: &Binder<E>) -> Result<Vec<Var<E>>> {
        self.embed(&analyze(self.kind, video, lead)?, binder)
    }

    /// Inverse projections and synthesis back to pixels.
    pub fn unpatchify(&self, streams: &[Var<E>], lead: bool, binder: &Binder<E>) -> Result<Var<E>> {
        if streams.len() != self.kind.groups() {
            return Err(dim_err!("expected {} streams, got {}", self.kind.groups(), streams.len()));
        }
        let grid = Grid::for_tokens(streams[0].shape(), lead)?;
        for (s, lin) in streams.iter().zip(&self.inv_image) {
            let sh = s.shape();
            if sh.len() != 4 || sh[..3] != [grid.rows(), grid.h, grid.w] || sh[3] != lin.input_dim() {
                return Err(dim_err!("stream {:?} inconsistent with grid {:?} width {}", sh, grid, lin.input_dim()));
            }
        }
        let image = if lead {
            Some(
                streams
                    .iter()
                    .zip(&self.inv_image)
                    .map(|(s, lin)| lin.forward(&s.slice_axis0(0, 1)?, binder))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let video = if grid.video_rows > 0 {
            Some(
                streams
                    .iter()
                    .zip(&self.inv_video)
                    .map(|(s, lin)| {
                        let rows = if lead { s.slice_axis0(1, grid.video_rows)? } else { s.clone() };
                        lin.forward(&rows, binder)
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        synthesize_var(self.kind, image, video)
    }
}

impl<E: Element> Module<E> for Patchifier<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<E>)) {
        self.fwd_image.visit(&join(prefix, "fwd_image"), f);
        self.fwd_video.visit(&join(prefix, "fwd_video"), f);
        self.inv_image.visit(&join(prefix, "inv_image"), f);
        self.inv_video.visit(&join(prefix, "inv_video"), f);
        if let Some(n) = &self.norm_image {
            n.visit(&join(prefix, "norm_image"), f);
        }
        if let Some(n) = &self.norm_video {
            n.visit(&join(prefix, "norm_video"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.fwd_image.visit_mut(&join(prefix, "fwd_image"), f);
        self.fwd_video.visit_mut(&join(prefix, "fwd_video"), f);
        self.inv_image.visit_mut(&join(prefix, "inv_image"), f);
        self.inv_video.visit_mut(&join(prefix, "inv_video"), f);
        if let Some(n) = &mut self.norm_image {
            n.visit_mut(&join(prefix, "norm_image"), f);
        }
        if let Some(n) = &mut self.norm_video {
            n.visit_mut(&join(prefix, "norm_video"), f);
        }
    }
}
