//! Temporal tiling: cached streaming inference and overlapped chunking.
//!
//! In streaming mode every causal convolution keeps the last two temporal
//! slices of its input, so chunk-by-chunk processing reproduces the padding
//! context a full pass would see. The first chunk holds the image frame
//! (`1 + 4k` frames); later chunks hold `4k` frames. Patch geometry never
//! crosses a 4-frame block, so the patch stage needs no cache.

use crate::autograd::{Binder, Var};
use crate::backbone::{ConvCaches, Ctx};
use crate::error::{Error, Result};
use crate::model::{validate_clip, validate_video, Model, ModelConfig};
use crate::patchifier::C_T;
use crate::tensor::{Element, Tensor};

/// Caches and bookkeeping for one stream in one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState<E: Element> {
    pub caches: ConvCaches<E>,
    /// Chunks processed so far.
    pub chunks: usize,
    /// Spatial extents fixed by the first chunk.
    pub extent: Option<(usize, usize)>,
    pub config: ModelConfig,
}

impl<E: Element> StreamState<E> {
    pub fn new(model: &Model<E>) -> Self {
        StreamState { caches: ConvCaches::new(), chunks: 0, extent: None, config: model.config.clone() }
    }

    fn begin(&mut self, model: &Model<E>, h: usize, w: usize) -> Result<bool> {
        if model.config != self.config {
            return Err(Error::Version("stream state belongs to a different model configuration".into()));
        }
        match self.extent {
            Some(e) if e != (h, w) => {
                return Err(Error::Chunking(format!("chunk extent {h}x{w} differs from stream extent {}x{}", e.0, e.1)))
            }
            _ => self.extent = Some((h, w)),
        }
        self.caches.rewind();
        Ok(self.chunks == 0)
    }
}

/// Encodes the next chunk of a stream, returning its latent rows.
pub fn stream_encode_chunk<E: Element>(model: &Model<E>, state: &mut StreamState<E>, chunk: &Tensor<E>) -> Result<Tensor<E>> {
    let s = chunk.shape();
    if s.len() != 4 {
        return Err(Error::Input(format!("chunk must be [F, H, W, 3], got {:?}", s)));
    }
    let first = state.chunks == 0;
    let f = s[0];
    let valid = if first { f % C_T == 1 } else { f > 0 && f % C_T == 0 };
    if !valid {
        return Err(Error::Chunking(format!(
            "{} chunk has {} frames; expected {}",
            if first { "first" } else { "later" },
            f,
            if first { "1 + 4k" } else { "a positive multiple of 4" }
        )));
    }
    validate_clip(chunk, first)?;
    let lead = state.begin(model, s[1], s[2])?;
    let binder = Binder::inference();
    let z = {
        let mut ctx = Ctx::streaming(&binder, &mut state.caches);
        model.encode_var(chunk, lead, &mut ctx, None)?.z.value().clone()
    };
    state.chunks += 1;
    Ok(z)
}

/// Decodes the next latent chunk of a stream, returning its frames.
pub fn stream_decode_chunk<E: Element>(model: &Model<E>, state: &mut StreamState<E>, z: &Tensor<E>) -> Result<Tensor<E>> {
    model.check_latent(z)?;
    let lead = state.begin(model, z.shape()[1], z.shape()[2])?;
    let binder = Binder::inference();
    let out = {
        let mut ctx = Ctx::streaming(&binder, &mut state.caches);
        model.decode_var(&Var::constant(z.clone()), lead, &mut ctx)?.value().clone()
    };
    state.chunks += 1;
    Ok(out)
}

pub fn stream_encode<E: Element>(model: &Model<E>, chunks: &[Tensor<E>], state: &mut StreamState<E>) -> Result<Vec<Tensor<E>>> {
    chunks.iter().map(|c| stream_encode_chunk(model, state, c)).collect()
}

pub fn stream_decode<E: Element>(model: &Model<E>, chunks: &[Tensor<E>], state: &mut StreamState<E>) -> Result<Vec<Tensor<E>>> {
    chunks.iter().map(|c| stream_decode_chunk(model, state, c)).collect()
}

/// Splits along axis 0 into consecutive pieces of the given lengths.
pub fn split_rows<E: Element>(t: &Tensor<E>, lengths: &[usize]) -> Result<Vec<Tensor<E>>> {
    if lengths.iter().sum::<usize>() != t.shape().first().copied().unwrap_or(0) || lengths.contains(&0) {
        return Err(Error::Chunking(format!("lengths {:?} do not partition {} rows", lengths, t.shape()[0])));
    }
    let mut start = 0;
    lengths
        .iter()
        .map(|&n| {
            let piece = t.slice_axis0(start, n);
            start += n;
            piece
        })
        .collect()
}

/// Frame counts for chunking a `frames`-long clip: the first chunk has
/// `first` frames (`1 + 4k`), later ones `first - 1` frames, the last
/// possibly shorter.
pub fn frame_chunks(frames: usize, first: usize) -> Result<Vec<usize>> {
    if first == 0 || first % C_T != 1 || frames % C_T != 1 {
        return Err(Error::Chunking(format!("cannot chunk {frames} frames with a first chunk of {first}")));
    }
    let first = first.min(frames);
    let mut out = vec![first];
    let mut left = frames - first;
    let step = (first - 1).max(C_T);
    while left > 0 {
        let n = step.min(left);
        out.push(n);
        left -= n;
    }
    Ok(out)
}

/// Latent-row counts matching [`frame_chunks`].
pub fn row_chunks(rows: usize, first: usize) -> Result<Vec<usize>> {
    let frames = frame_chunks((rows.max(1) - 1) * C_T + 1, first)?;
    Ok(frames.iter().enumerate().map(|(i, &f)| if i == 0 { 1 + f / C_T } else { f / C_T }).collect())
}

/// Encodes overlapping windows independently (no caches) and stitches them.
///
/// Units are latent rows. Window `i` covers rows `[s_i, s_i + chunk)` with
/// `s_{i+1} = s_i + chunk - overlap`; a window starting at row `s > 0` is
/// encoded as the standalone clip of frames `4s - 4 ..= 4(s + chunk - 1)`
/// (its extra lead row is discarded). Rows covered by several windows are
/// taken from the earliest one. The result is approximate near window starts.
pub fn overlapped_encode<E: Element>(model: &Model<E>, x: &Tensor<E>, chunk: usize, overlap: usize) -> Result<Tensor<E>> {
    if chunk == 0 || overlap >= chunk {
        return Err(Error::Chunking(format!("need chunk > overlap >= 0, got chunk {chunk}, overlap {overlap}")));
    }
    let grid = validate_video(x)?;
    let rows = grid.rows();
    let mut kept: Vec<Tensor<E>> = Vec::new();
    let mut covered = 0;
    let mut start = 0;
    loop {
        let end = (start + chunk).min(rows);
        let (clip, skip) = if start == 0 {
            (x.slice_axis0(0, (end - 1) * C_T + 1)?, 0)
        } else {
            (x.slice_axis0((start - 1) * C_T, (end - start) * C_T + 1)?, 1)
        };
        let z = model.encode(&clip)?.z;
        let fresh = end - covered.max(start);
        if fresh > 0 {
            kept.push(z.slice_axis0(skip + covered - start, fresh)?);
            covered = end;
        }
        if end == rows {
            break;
        }
        start += chunk - overlap;
    }
    Tensor::concat_axis0(&kept.iter().collect::<Vec<_>>())
}
