//! Single-level orthonormal Haar transforms on channel-first volumes.
//!
//! Every axis is split into a low band `(a + b) / sqrt(2)` and a high band
//! `(a - b) / sqrt(2)` of its even/odd sample pairs. The 3D transform is the
//! separable product over time, height and width; subbands are named by
//! their (time, height, width) bands and the seven high subbands are stored
//! concatenated along channels in the order
//! `llh, lhl, lhh, hll, hlh, hhl, hhh` (each block holding all `C` source
//! channels). The 2D transform orders its three high subbands `lh, hl, hh`.
//!
//! Because the normalization is orthonormal, the inverse transform is also
//! the adjoint, and the sum of squares is preserved.

use crate::error::{dim_err, Result};
use crate::tensor::{Element, Tensor};

/// Frequency decomposition of a `[C, T, H, W]` volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet3D<E: Element> {
    /// `[C, T/2, H/2, W/2]`
    pub lll: Tensor<E>,
    /// `[7C, T/2, H/2, W/2]`
    pub high: Tensor<E>,
}

/// Frequency decomposition of a `[C, H, W]` image.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet2D<E: Element> {
    /// `[C, H/2, W/2]`
    pub ll: Tensor<E>,
    /// `[3C, H/2, W/2]`
    pub high: Tensor<E>,
}

/// In-place butterfly across `n` bands on one axis each: after the call,
/// `v[band]` holds the coefficient whose bit pattern (MSB = first axis)
/// equals `band`.
#[inline]
fn butterflies<E: Element>(v: &mut [E], axes: usize) {
    let r = E::lit(std::f64::consts::FRAC_1_SQRT_2);
    for axis in 0..axes {
        let stride = 1 << (axes - 1 - axis);
        for base in 0..v.len() {
            if base & stride == 0 {
                let (a, b) = (v[base], v[base | stride]);
                v[base] = (a + b) * r;
                v[base | stride] = (a - b) * r;
            }
        }
    }
}

fn half_extents(shape: &[usize], what: &str) -> Result<Vec<usize>> {
    if let Some(odd) = shape.iter().skip(1).find(|&&d| d % 2 != 0) {
        return Err(dim_err!("{}: extent {} of {:?} is odd", what, odd, shape));
    }
    Ok(shape.iter().enumerate().map(|(i, &d)| if i == 0 { d } else { d / 2 }).collect())
}

pub fn dwt3<E: Element>(x: &Tensor<E>) -> Result<SubbandSet3D<E>> {
    let &[c, t, h, w] = x.shape() else {
        return Err(dim_err!("dwt3 expects [C, T, H, W], got {:?}", x.shape()));
    };
    let hs = half_extents(x.shape(), "dwt3")?;
    let (t2, h2, w2) = (hs[1], hs[2], hs[3]);
    let band = t2 * h2 * w2;
    let src = x.data();
    let mut lll = vec![E::zero(); c * band];
    let mut high = vec![E::zero(); 7 * c * band];
    let mut v = [E::zero(); 8];
    for ci in 0..c {
        for ti in 0..t2 {
            for hi in 0..h2 {
                for wi in 0..w2 {
                    for (k, slot) in v.iter_mut().enumerate() {
                        let (dt, dh, dw) = (k >> 2, (k >> 1) & 1, k & 1);
                        *slot = src[((ci * t + 2 * ti + dt) * h + 2 * hi + dh) * w + 2 * wi + dw];
                    }
                    butterflies(&mut v, 3);
                    let o = (ti * h2 + hi) * w2 + wi;
                    lll[ci * band + o] = v[0];
                    for s in 1..8 {
                        high[((s - 1) * c + ci) * band + o] = v[s];
                    }
                }
            }
        }
    }
    Ok(SubbandSet3D {
        lll: Tensor::from_parts(vec![c, t2, h2, w2], lll),
        high: Tensor::from_parts(vec![7 * c, t2, h2, w2], high),
    })
}

pub fn idwt3<E: Element>(s: &SubbandSet3D<E>) -> Result<Tensor<E>> {
    let &[c, t2, h2, w2] = s.lll.shape() else {
        return Err(dim_err!("idwt3 expects lll [C, T, H, W], got {:?}", s.lll.shape()));
    };
    if s.high.shape() != [7 * c, t2, h2, w2] {
        return Err(dim_err!("idwt3: high {:?} inconsistent with lll {:?}", s.high.shape(), s.lll.shape()));
    }
    let (t, h, w) = (2 * t2, 2 * h2, 2 * w2);
    let band = t2 * h2 * w2;
    let (lll, high) = (s.lll.data(), s.high.data());
    let mut out = vec![E::zero(); c * t * h * w];
    let mut v = [E::zero(); 8];
    for ci in 0..c {
        for ti in 0..t2 {
            for hi in 0..h2 {
                for wi in 0..w2 {
                    let o = (ti * h2 + hi) * w2 + wi;
                    v[0] = lll[ci * band + o];
                    for k in 1..8 {
                        v[k] = high[((k - 1) * c + ci) * band + o];
                    }
                    // the orthonormal Haar butterfly is its own inverse
                    butterflies(&mut v, 3);
                    for (k, &val) in v.iter().enumerate() {
                        let (dt, dh, dw) = (k >> 2, (k >> 1) & 1, k & 1);
                        out[((ci * t + 2 * ti + dt) * h + 2 * hi + dh) * w + 2 * wi + dw] = val;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, t, h, w], out))
}

pub fn dwt2<E: Element>(x: &Tensor<E>) -> Result<SubbandSet2D<E>> {
    let &[c, h, w] = x.shape() else {
        return Err(dim_err!("dwt2 expects [C, H, W], got {:?}", x.shape()));
    };
    let hs = half_extents(x.shape(), "dwt2")?;
    let (h2, w2) = (hs[1], hs[2]);
    let band = h2 * w2;
    let src = x.data();
    let mut ll = vec![E::zero(); c * band];
    let mut high = vec![E::zero(); 3 * c * band];
    let mut v = [E::zero(); 4];
    for ci in 0..c {
        for hi in 0..h2 {
            for wi in 0..w2 {
                for (k, slot) in v.iter_mut().enumerate() {
                    *slot = src[(ci * h + 2 * hi + (k >> 1)) * w + 2 * wi + (k & 1)];
                }
                butterflies(&mut v, 2);
                let o = hi * w2 + wi;
                ll[ci * band + o] = v[0];
                for s in 1..4 {
                    high[((s - 1) * c + ci) * band + o] = v[s];
                }
            }
        }
    }
    Ok(SubbandSet2D {
        ll: Tensor::from_parts(vec![c, h2, w2], ll),
        high: Tensor::from_parts(vec![3 * c, h2, w2], high),
    })
}

pub fn idwt2<E: Element>(s: &SubbandSet2D<E>) -> Result<Tensor<E>> {
    let &[c, h2, w2] = s.ll.shape() else {
        return Err(dim_err!("idwt2 expects ll [C, H, W], got {:?}", s.ll.shape()));
    };
    if s.high.shape() != [3 * c, h2, w2] {
        return Err(dim_err!("idwt2: high {:?} inconsistent with ll {:?}", s.high.shape(), s.ll.shape()));
    }
    let (h, w) = (2 * h2, 2 * w2);
    let band = h2 * w2;
    let (ll, high) = (s.ll.data(), s.high.data());
    let mut out = vec![E::zero(); c * h * w];
    let mut v = [E::zero(); 4];
    for ci in 0..c {
        for hi in 0..h2 {
            for wi in 0..w2 {
                let o = hi * w2 + wi;
                v[0] = ll[ci * band + o];
                for k in 1..4 {
                    v[k] = high[((k - 1) * c + ci) * band + o];
                }
                butterflies(&mut v, 2);
                for (k, &val) in v.iter().enumerate() {
                    out[(ci * h + 2 * hi + (k >> 1)) * w + 2 * wi + (k & 1)] = val;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Dense 1D orthonormal Haar analysis matrix: rows `0..n/2` low, rest high.
    fn haar_matrix(n: usize) -> Vec<Vec<f64>> {
        let r = 0.5f64.sqrt();
        let mut m = vec![vec![0.0; n]; n];
        for i in 0..n / 2 {
            m[i][2 * i] = r;
            m[i][2 * i + 1] = r;
            m[n / 2 + i][2 * i] = r;
            m[n / 2 + i][2 * i + 1] = -r;
        }
        m
    }

    /// Applies the analysis matrices as a full tensor-product contraction and
    /// returns the coefficient volume in band-blocked layout
    /// `coeff[c][bt*T/2+i][bh*H/2+j][bw*W/2+k]`.
    fn kernel_product_3d(x: &Tensor<f64>) -> Vec<f64> {
        let s = x.shape();
        let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
        let (mt, mh, mw) = (haar_matrix(t), haar_matrix(h), haar_matrix(w));
        let mut out = vec![0.0; x.numel()];
        for ci in 0..c {
            for a in 0..t {
                for b in 0..h {
                    for d in 0..w {
                        let mut acc = 0.0;
                        for ta in 0..t {
                            for hb in 0..h {
                                for wd in 0..w {
                                    acc += mt[a][ta] * mh[b][hb] * mw[d][wd] * x.data()[((ci * t + ta) * h + hb) * w + wd];
                                }
                            }
                        }
                        out[((ci * t + a) * h + b) * w + d] = acc;
                    }
                }
            }
        }
        out
    }

    fn subband_view_3d(s: &SubbandSet3D<f64>, c: usize, t: usize, h: usize, w: usize) -> Vec<f64> {
        let (t2, h2, w2) = (t / 2, h / 2, w / 2);
        let mut out = vec![0.0; c * t * h * w];
        for ci in 0..c {
            for band in 0..8 {
                let (bt, bh, bw) = (band >> 2, (band >> 1) & 1, band & 1);
                for i in 0..t2 {
                    for j in 0..h2 {
                        for k in 0..w2 {
                            let o = (i * h2 + j) * w2 + k;
                            let v = if band == 0 {
                                s.lll.data()[ci * t2 * h2 * w2 + o]
                            } else {
                                s.high.data()[((band - 1) * c + ci) * t2 * h2 * w2 + o]
                            };
                            out[((ci * t + bt * t2 + i) * h + bh * h2 + j) * w + bw * w2 + k] = v;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn dwt3_matches_kernel_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[3, 4, 8, 8], &mut rng);
        let s = dwt3(&x).unwrap();
        let got = subband_view_3d(&s, 3, 4, 8, 8);
        let want = kernel_product_3d(&x);
        let diff = got.iter().zip(&want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-12, "max diff {diff}");
    }

    #[test]
    fn idwt3_matches_adjoint_of_analysis() {
        // Build the analysis operator column by column, then apply its transpose.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (c, t, h, w) = (2, 2, 4, 4);
        let n = c * t * h * w;
        let lll = Tensor::<f64>::randn(&[c, 1, 2, 2], &mut rng);
        let high = Tensor::<f64>::randn(&[7 * c, 1, 2, 2], &mut rng);
        let coeffs: Vec<f64> = lll.data().iter().chain(high.data()).copied().collect();
        let mut columns = Vec::with_capacity(n);
        for j in 0..n {
            let e = Tensor::from_fn(&[c, t, h, w], |i| if i == j { 1.0 } else { 0.0 });
            let s = dwt3(&e).unwrap();
            columns.push(s.lll.data().iter().chain(s.high.data()).copied().collect::<Vec<f64>>());
        }
        let adjoint: Vec<f64> = columns.iter().map(|col| col.iter().zip(&coeffs).map(|(a, b)| a * b).sum()).collect();
        let got = idwt3(&SubbandSet3D { lll, high }).unwrap();
        let diff = got.data().iter().zip(&adjoint).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn constant_volume() {
        let x = Tensor::<f64>::full(&[2, 4, 4, 6], 0.3);
        let s = dwt3(&x).unwrap();
        let target = 2.0 * 2f64.sqrt() * 0.3;
        assert!(s.lll.data().iter().all(|&v| (v - target).abs() < 1e-14));
        assert!(s.high.max_abs() < 1e-14);
        let back = idwt3(&s).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-14);
    }

    #[test]
    fn dwt2_hand_example() {
        let x = Tensor::<f64>::new(&[1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let s = dwt2(&x).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(s.ll.item(), 8.0));
        assert!(close(s.high.data()[0], -2.0));
        assert!(close(s.high.data()[1], -4.0));
        assert!(close(s.high.data()[2], 0.0));
    }

    #[test]
    fn dwt2_constant_and_zero() {
        let s = dwt2(&Tensor::<f64>::full(&[3, 4, 4], 1.5)).unwrap();
        assert!(s.ll.data().iter().all(|&v| (v - 3.0).abs() < 1e-14));
        assert!(s.high.max_abs() < 1e-14);
        let z = idwt2(&SubbandSet2D { ll: Tensor::<f32>::zeros(&[3, 4, 4]), high: Tensor::zeros(&[9, 4, 4]) }).unwrap();
        assert_eq!(z, Tensor::zeros(&[3, 8, 8]));
    }

    #[test]
    fn idwt2_matches_adjoint_of_analysis() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, h, w) = (2, 4, 6);
        let n = c * h * w;
        let ll = Tensor::<f64>::randn(&[c, 2, 3], &mut rng);
        let high = Tensor::<f64>::randn(&[3 * c, 2, 3], &mut rng);
        let coeffs: Vec<f64> = ll.data().iter().chain(high.data()).copied().collect();
        let adjoint: Vec<f64> = (0..n)
            .map(|j| {
                let e = Tensor::from_fn(&[c, h, w], |i| if i == j { 1.0 } else { 0.0 });
                let s = dwt2(&e).unwrap();
                s.ll.data().iter().chain(s.high.data()).zip(&coeffs).map(|(a, b)| a * b).sum()
            })
            .collect();
        let got = idwt2(&SubbandSet2D { ll, high }).unwrap();
        let diff = got.data().iter().zip(&adjoint).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn odd_extents_rejected() {
        assert!(matches!(dwt3(&Tensor::<f32>::zeros(&[1, 3, 4, 4])), Err(Error::Dimension(_))));
        assert!(matches!(dwt2(&Tensor::<f32>::zeros(&[1, 4, 5])), Err(Error::Dimension(_))));
        let bad = SubbandSet3D { lll: Tensor::<f32>::zeros(&[1, 1, 2, 2]), high: Tensor::zeros(&[6, 1, 2, 2]) };
        assert!(matches!(idwt3(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn high_band_order_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::<f64>::randn(&[1, 2, 2, 2], &mut rng);
        let s = dwt3(&x).unwrap();
        let mut swapped = s.high.data().to_vec();
        swapped.swap(0, 1);
        let permuted = SubbandSet3D { lll: s.lll.clone(), high: Tensor::new(s.high.shape(), swapped).unwrap() };
        assert!(idwt3(&permuted).unwrap().max_abs_diff(&x).unwrap() > 1e-3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn roundtrip_energy_and_linearity(c in 1usize..4, t in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let shape = [c, 2 * t, 2 * h, 2 * w];
                let x = Tensor::<f64>::randn(&shape, &mut rng);
                let y = Tensor::<f64>::randn(&shape, &mut rng);
                let sx = dwt3(&x).unwrap();
                prop_assert!(idwt3(&sx).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
                let energy = sx.lll.sq_norm() + sx.high.sq_norm();
                prop_assert!((energy - x.sq_norm()).abs() <= 1e-10 * x.sq_norm());
                let combo = x.scale(a).add(&y.scale(b)).unwrap();
                let sc = dwt3(&combo).unwrap();
                let sy = dwt3(&y).unwrap();
                let lin = sx.high.scale(a).add(&sy.high.scale(b)).unwrap();
                prop_assert!(sc.high.max_abs_diff(&lin).unwrap() < 1e-12);
                let x32: Tensor<f32> = x.cast();
                let s32 = dwt3(&x32).unwrap();
                let e32 = (s32.lll.sq_norm() + s32.high.sq_norm()) as f64;
                prop_assert!((e32 - x.sq_norm()).abs() <= 1e-5 * x.sq_norm());
            }

            #[test]
            fn roundtrip_2d(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::<f64>::randn(&[c, 2 * h, 2 * w], &mut rng);
                let s = dwt2(&x).unwrap();
                prop_assert!(idwt2(&s).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
                prop_assert!((s.ll.sq_norm() + s.high.sq_norm() - x.sq_norm()).abs() <= 1e-10 * x.sq_norm());
                // synthesis then analysis is also the identity
                let back = dwt2(&idwt2(&s).unwrap()).unwrap();
                prop_assert!(back.high.max_abs_diff(&s.high).unwrap() < 1e-12);
            }
        }
    }
}
