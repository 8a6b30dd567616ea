//! Causal depthwise 3x3x3 convolution on channels-last `[T, H, W, C]` volumes.
//!
//! Stride is 1 on every axis. Height and width are zero padded by one on
//! each side. The temporal axis is padded with two slices in front: either
//! the cached slices from the previous chunk or zeros, so output `t` only
//! sees inputs `t-2..=t`.

use super::{Element, Tensor};
use crate::error::{dim_err, Error, Result};

/// Number of temporal slices a causal kernel-3 convolution carries over.
pub const CACHE_SLICES: usize = 2;

struct Geom {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
}

impl Geom {
    fn frame(&self) -> usize {
        self.h * self.w * self.c
    }
}

fn check(x: &Tensor<impl Element>, k: &Tensor<impl Element>, cache: Option<&Tensor<impl Element>>) -> Result<Geom> {
    let &[t, h, w, c] = x.shape() else {
        return Err(dim_err!("dwconv3d_causal expects [T, H, W, C], got {:?}", x.shape()));
    };
    if k.shape() != [3, 3, 3, c] {
        return Err(dim_err!("depthwise kernel {:?} does not match {} channels", k.shape(), c));
    }
    if let Some(cache) = cache {
        if cache.shape() != [CACHE_SLICES, h, w, c] {
            return Err(Error::Cache(format!(
                "cache shape {:?}, expected {:?}",
                cache.shape(),
                [CACHE_SLICES, h, w, c]
            )));
        }
    }
    Ok(Geom { t, h, w, c })
}

/// Temporal slice `ti` of the causally padded input (`ti < 2` is padding).
fn padded_frame<'a, E: Element>(
    g: &Geom,
    x: &'a [E],
    cache: Option<&'a [E]>,
    ti: usize,
) -> Option<&'a [E]> {
    let f = g.frame();
    if ti < CACHE_SLICES {
        cache.map(|c| &c[ti * f..(ti + 1) * f])
    } else {
        let s = ti - CACHE_SLICES;
        Some(&x[s * f..(s + 1) * f])
    }
}

pub fn dwconv3d_causal<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    cache: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let g = check(x, kernel, cache)?;
    if bias.shape() != [g.c] {
        return Err(dim_err!("depthwise bias {:?} does not match {} channels", bias.shape(), g.c));
    }
    let (xd, kd, bd) = (x.data(), kernel.data(), bias.data());
    let cd = cache.map(|c| c.data());
    let c = g.c;
    let mut out = vec![E::zero(); x.numel()];
    for t in 0..g.t {
        for h in 0..g.h {
            for w in 0..g.w {
                let o = ((t * g.h + h) * g.w + w) * c;
                let acc = &mut out[o..o + c];
                acc.copy_from_slice(bd);
                for dt in 0..3 {
                    let Some(src) = padded_frame(&g, xd, cd, t + dt) else { continue };
                    for dh in 0..3 {
                        let Some(hh) = (h + dh).checked_sub(1).filter(|&v| v < g.h) else { continue };
                        for dw in 0..3 {
                            let Some(ww) = (w + dw).checked_sub(1).filter(|&v| v < g.w) else { continue };
                            let s = (hh * g.w + ww) * c;
                            let kk = ((dt * 3 + dh) * 3 + dw) * c;
                            for ((a, &sv), &kv) in acc.iter_mut().zip(&src[s..s + c]).zip(&kd[kk..kk + c]) {
                                *a += sv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Gradients `(d_x, d_kernel, d_bias)` of [`dwconv3d_causal`]; the cache is
/// treated as a constant.
pub fn dwconv3d_causal_backward<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    cache: Option<&Tensor<E>>,
    grad_out: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let g = check(x, kernel, cache)?;
    x.expect_same_shape(grad_out, "dwconv3d_causal_backward")?;
    let (xd, kd, gd) = (x.data(), kernel.data(), grad_out.data());
    let cd = cache.map(|c| c.data());
    let c = g.c;
    let f = g.frame();
    let mut gx = vec![E::zero(); x.numel()];
    let mut gk = vec![E::zero(); kernel.numel()];
    let mut gb = vec![E::zero(); c];
    for t in 0..g.t {
        for h in 0..g.h {
            for w in 0..g.w {
                let o = ((t * g.h + h) * g.w + w) * c;
                let go = &gd[o..o + c];
                for (b, &v) in gb.iter_mut().zip(go) {
                    *b += v;
                }
                for dt in 0..3 {
                    let ti = t + dt;
                    let src = padded_frame(&g, xd, cd, ti);
                    for dh in 0..3 {
                        let Some(hh) = (h + dh).checked_sub(1).filter(|&v| v < g.h) else { continue };
                        for dw in 0..3 {
                            let Some(ww) = (w + dw).checked_sub(1).filter(|&v| v < g.w) else { continue };
                            let s = (hh * g.w + ww) * c;
                            let kk = ((dt * 3 + dh) * 3 + dw) * c;
                            if let Some(src) = src {
                                for ((a, &sv), &gv) in gk[kk..kk + c].iter_mut().zip(&src[s..s + c]).zip(go) {
                                    *a += sv * gv;
                                }
                            }
                            if ti >= CACHE_SLICES {
                                let xs = (ti - CACHE_SLICES) * f + s;
                                for ((a, &kv), &gv) in gx[xs..xs + c].iter_mut().zip(&kd[kk..kk + c]).zip(go) {
                                    *a += kv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(kernel.shape().to_vec(), gk),
        Tensor::from_parts(vec![c], gb),
    ))
}

/// The two trailing slices of `cat(cache or zeros, x)` along time: the
/// padding the next chunk needs to continue this layer losslessly.
pub fn next_cache<E: Element>(x: &Tensor<E>, cache: Option<&Tensor<E>>) -> Result<Tensor<E>> {
    let &[t, h, w, c] = x.shape() else {
        return Err(dim_err!("cache source must be [T, H, W, C], got {:?}", x.shape()));
    };
    if t >= CACHE_SLICES {
        return x.slice_axis0(t - CACHE_SLICES, CACHE_SLICES);
    }
    let prev = match cache {
        Some(p) => p.clone(),
        None => Tensor::zeros(&[CACHE_SLICES, h, w, c]),
    };
    let joined = Tensor::concat_axis0(&[&prev, x])?;
    joined.slice_axis0(joined.shape()[0] - CACHE_SLICES, CACHE_SLICES)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight six-deep loop over the zero/cache padded volume.
    fn oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, cache: Option<&Tensor<f64>>) -> Tensor<f64> {
        let [t, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let at = |ti: isize, hi: isize, wi: isize, ci: usize| -> f64 {
            if hi < 0 || wi < 0 || hi >= h as isize || wi >= w as isize {
                return 0.0;
            }
            let (hi, wi) = (hi as usize, wi as usize);
            if ti < 0 {
                return match cache {
                    Some(cc) => cc.data()[(((ti + 2) as usize * h + hi) * w + wi) * c + ci],
                    None => 0.0,
                };
            }
            x.data()[((ti as usize * h + hi) * w + wi) * c + ci]
        };
        let mut out = vec![0.0; x.numel()];
        for ti in 0..t {
            for hi in 0..h {
                for wi in 0..w {
                    for ci in 0..c {
                        let mut s = b.data()[ci];
                        for a in 0..3 {
                            for bb in 0..3 {
                                for d in 0..3 {
                                    let kv = k.data()[((a * 3 + bb) * 3 + d) * c + ci];
                                    s += kv * at(ti as isize + a as isize - 2, hi as isize + bb as isize - 1, wi as isize + d as isize - 1, ci);
                                }
                            }
                        }
                        out[((ti * h + hi) * w + wi) * c + ci] = s;
                    }
                }
            }
        }
        Tensor::new(x.shape(), out).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[4, 5, 6, 3], &mut rng);
        let k = Tensor::from_fn(&[3, 3, 3, 3], |i| if i / 3 == (2 * 3 + 1) * 3 + 1 { 1.0 } else { 0.0 });
        let b = Tensor::zeros(&[3]);
        assert_eq!(dwconv3d_causal(&x, &k, &b, None).unwrap(), x);
    }

    #[test]
    fn constant_input_all_ones_kernel() {
        let x = Tensor::<f64>::full(&[4, 5, 5, 2], 0.75);
        let k = Tensor::full(&[3, 3, 3, 2], 1.0);
        let out = dwconv3d_causal(&x, &k, &Tensor::zeros(&[2]), None).unwrap();
        for t in 2..4 {
            for h in 1..4 {
                for w in 1..4 {
                    for c in 0..2 {
                        assert_eq!(out.data()[((t * 5 + h) * 5 + w) * 2 + c], 27.0 * 0.75);
                    }
                }
            }
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[4, 5, 5, 2], &mut rng);
        let k = Tensor::randn(&[3, 3, 3, 2], &mut rng);
        let b = Tensor::randn(&[2], &mut rng);
        let out = dwconv3d_causal(&x, &k, &b, None).unwrap();
        assert!(out.max_abs_diff(&oracle(&x, &k, &b, None)).unwrap() < 1e-12);
        let cache = Tensor::randn(&[2, 5, 5, 2], &mut rng);
        let out = dwconv3d_causal(&x, &k, &b, Some(&cache)).unwrap();
        assert!(out.max_abs_diff(&oracle(&x, &k, &b, Some(&cache))).unwrap() < 1e-12);
    }

    #[test]
    fn future_zeroing_keeps_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f32>::randn(&[6, 4, 4, 3], &mut rng);
        let k = Tensor::randn(&[3, 3, 3, 3], &mut rng);
        let b = Tensor::randn(&[3], &mut rng);
        let full = dwconv3d_causal(&x, &k, &b, None).unwrap();
        for t0 in 0..5 {
            let mut z = x.clone();
            let frame = 4 * 4 * 3;
            z.data_mut()[(t0 + 1) * frame..].fill(0.0);
            let out = dwconv3d_causal(&z, &k, &b, None).unwrap();
            assert_eq!(out.data()[..(t0 + 1) * frame], full.data()[..(t0 + 1) * frame]);
        }
    }

    #[test]
    fn cache_shape_is_validated() {
        let x = Tensor::<f32>::zeros(&[2, 3, 3, 4]);
        let k = Tensor::zeros(&[3, 3, 3, 4]);
        let b = Tensor::zeros(&[4]);
        let bad = Tensor::zeros(&[1, 3, 3, 4]);
        assert!(matches!(dwconv3d_causal(&x, &k, &b, Some(&bad)), Err(Error::Cache(_))));
    }

    #[test]
    fn chunked_with_cache_equals_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(&[7, 3, 4, 2], &mut rng);
        let k = Tensor::randn(&[3, 3, 3, 2], &mut rng);
        let b = Tensor::randn(&[2], &mut rng);
        let full = dwconv3d_causal(&x, &k, &b, None).unwrap();
        let mut cache: Option<Tensor<f64>> = None;
        let mut parts = Vec::new();
        for (s, len) in [(0, 1), (1, 1), (2, 3), (5, 2)] {
            let chunk = x.slice_axis0(s, len).unwrap();
            parts.push(dwconv3d_causal(&chunk, &k, &b, cache.as_ref()).unwrap());
            cache = Some(next_cache(&chunk, cache.as_ref()).unwrap());
        }
        let refs: Vec<_> = parts.iter().collect();
        let joined = Tensor::concat_axis0(&refs).unwrap();
        assert_eq!(joined, full);
    }
}
