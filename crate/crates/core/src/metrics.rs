//! Reconstruction metrics and the analytic cost model.

use serde::{Serialize, Serializer};

use crate::error::{dim_err, Error, Result};
use crate::model::{ModelConfig, ParamBreakdown};
use crate::patchifier::{Grid, PatchKind};
use crate::tensor::{Element, Tensor};

/// PSNR in dB of two tensors with values in `[-1, 1]` (compared on `[0, 1]`).
/// Identical inputs give `f64::INFINITY`.
pub fn psnr<E: Element>(x: &Tensor<E>, y: &Tensor<E>) -> Result<f64> {
    x.expect_same_shape(y, "psnr")?;
    if x.numel() == 0 {
        return Err(Error::Input("psnr of empty tensors".into()));
    }
    let se: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = (a - b).to_f64().expect("float") * 0.5;
            d * d
        })
        .sum();
    let mse = se / x.numel() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Serializes non-finite values as the strings `"inf"`, `"-inf"`, `"nan"`.
pub fn serialize_metric<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable 'valid' Gaussian filtering of an `h x w` plane.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * img[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel planes on the `[0, 1]` scale.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!("frame {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    if x.len() != h * w || y.len() != h * w {
        return Err(dim_err!("ssim planes must hold {} values", h * w));
    }
    let g = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mx = filter_valid(x, h, w, &g);
    let my = filter_valid(y, h, w, &g);
    let sxx = filter_valid(&prod(x, x), h, w, &g);
    let syy = filter_valid(&prod(y, y), h, w, &g);
    let sxy = filter_valid(&prod(x, y), h, w, &g);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let (va, vb, cov) = (sxx[i] - a * a, syy[i] - b * b, sxy[i] - a * b);
            ((2.0 * a * b + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((a * a + b * b + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// SSIM of two `[F, H, W, C]` videos with values in `[-1, 1]`: per frame and
/// channel, averaged over channels and then frames.
pub fn ssim<E: Element>(x: &Tensor<E>, y: &Tensor<E>) -> Result<f64> {
    x.expect_same_shape(y, "ssim")?;
    let &[f, h, w, c] = x.shape() else {
        return Err(dim_err!("ssim expects [F, H, W, C], got {:?}", x.shape()));
    };
    if f == 0 || c == 0 {
        return Err(Error::Input("ssim of an empty video".into()));
    }
    let plane = |t: &Tensor<E>, fi: usize, ci: usize| -> Vec<f64> {
        let base = fi * h * w * c;
        (0..h * w).map(|p| (t.data()[base + p * c + ci].to_f64().expect("float") + 1.0) * 0.5).collect()
    };
    let mut acc = 0.0;
    for fi in 0..f {
        let mut frame = 0.0;
        for ci in 0..c {
            frame += ssim_plane(&plane(x, fi, ci), &plane(y, fi, ci), h, w)?;
        }
        acc += frame / c as f64;
    }
    Ok(acc / f as f64)
}

// ---- cost model ----------------------------------------------------------

/// How multiply-accumulates are converted to FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// One multiply-accumulate counts as one FLOP.
    #[default]
    MacAsOne,
    /// One multiply-accumulate counts as two FLOPs.
    MacAsTwo,
}

/// Multiply-accumulates and other elementwise operations of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct OpCount {
    pub macs: u64,
    pub elementwise: u64,
}

impl OpCount {
    fn add(self, o: OpCount) -> OpCount {
        OpCount { macs: self.macs + o.macs, elementwise: self.elementwise + o.elementwise }
    }

    pub fn flops(&self, convention: FlopConvention) -> u64 {
        let k = match convention {
            FlopConvention::MacAsOne => 1,
            FlopConvention::MacAsTwo => 2,
        };
        k * self.macs + self.elementwise
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageCost {
    pub name: String,
    pub ops: OpCount,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub input_shape: [usize; 4],
    pub latent_shape: [usize; 4],
    pub convention: FlopConvention,
    pub params: ParamBreakdown,
    pub total_params: usize,
    pub encode: Vec<StageCost>,
    pub decode: Vec<StageCost>,
    pub encode_flops: u64,
    pub decode_flops: u64,
    pub total_flops: u64,
    pub total_tflops: f64,
    /// Same total under the other convention, for comparison.
    pub alternate_total_flops: u64,
}

fn naf_ops(tokens: u64, width: u64, e: u64) -> OpCount {
    OpCount {
        // depthwise 27 taps per site plus the two feedforward matrices
        macs: tokens * (27 * width + 2 * e * width * width),
        // conv bias, two GELUs, two FF biases and the residual add
        elementwise: tokens * (width + width + e * width + e * width + width + width),
    }
}

fn linear_ops(tokens: u64, input: u64, output: u64, bias: bool) -> OpCount {
    OpCount { macs: tokens * input * output, elementwise: if bias { tokens * output } else { 0 } }
}

/// Analytic parameter and operation counts for encoding plus decoding one
/// clip of shape `[F, H, W, 3]`.
pub fn cost_model(config: &ModelConfig, input_shape: [usize; 4]) -> Result<CostReport> {
    cost_model_with(config, input_shape, FlopConvention::default())
}

pub fn cost_model_with(config: &ModelConfig, input_shape: [usize; 4], convention: FlopConvention) -> Result<CostReport> {
    config.validate()?;
    let grid = Grid::for_video(&input_shape, true)?;
    let plane = (grid.h * grid.w) as u64;
    let image_tokens = plane;
    let video_tokens = grid.video_rows as u64 * plane;
    let tokens = image_tokens + video_tokens;
    let kind = config.patch_kind();
    let widths: Vec<u64> = config.stream_widths().iter().map(|&w| w as u64).collect();
    let (e, width, d) = (config.ff_expansion as u64, config.width as u64, config.d as u64);
    let pixels = input_shape.iter().product::<usize>() as u64;

    // Haar butterflies: one add and one scale per value per axis.
    let transform = match kind {
        PatchKind::Haar => {
            let first = (input_shape[1] * input_shape[2] * 3) as u64;
            OpCount { macs: 0, elementwise: first * 2 * 2 + (pixels - first) * 2 * 3 }
        }
        PatchKind::Rgb => OpCount::default(),
    };
    let mut projections = OpCount::default();
    let mut inverse = OpCount::default();
    for (i, (&di, &dv)) in kind.image_dims().iter().zip(kind.video_dims()).enumerate() {
        let w = widths[i];
        projections = projections
            .add(linear_ops(image_tokens, di as u64, w, true))
            .add(linear_ops(video_tokens, dv as u64, w, true));
        inverse = inverse
            .add(linear_ops(image_tokens, w, di as u64, true))
            .add(linear_ops(video_tokens, w, dv as u64, true));
    }
    if config.patch_norm {
        let dims: u64 = kind.image_dims().iter().map(|&v| v as u64).sum::<u64>() * image_tokens
            + kind.video_dims().iter().map(|&v| v as u64).sum::<u64>() * video_tokens;
        projections.elementwise += 7 * dims;
    }
    let trunk = config.trunk();
    let mut trunk_ops = OpCount::default();
    for &w in &widths {
        for _ in 0..trunk.stream_depth {
            trunk_ops = trunk_ops.add(naf_ops(tokens, w, e));
        }
    }
    for _ in 0..trunk.fuse_depth {
        trunk_ops = trunk_ops.add(naf_ops(tokens, width, e));
    }

    let sense = OpCount { macs: 2 * tokens * d * width, elementwise: 0 };
    let mut recover = OpCount { macs: tokens * d * width, elementwise: 0 };
    for _ in 0..config.stages {
        let mut stage = OpCount::default();
        for _ in 0..2 * crate::bottleneck::STAGE_DEPTH {
            stage = stage.add(naf_ops(tokens, width, e));
        }
        // naf_ops counts a residual add the non-residual stage layers lack
        stage.elementwise -= 2 * crate::bottleneck::STAGE_DEPTH as u64 * tokens * width;
        match config.bottleneck {
            crate::bottleneck::BottleneckKind::Cs => {
                // Phi p, Phi^T(.), the z subtraction, rho scaling, soft, two adds
                stage = stage.add(OpCount { macs: 2 * tokens * d * width, elementwise: tokens * (d + 4 * width) });
            }
            crate::bottleneck::BottleneckKind::Ae => {
                stage.elementwise += tokens * width;
            }
        }
        recover = recover.add(stage);
    }

    let stage = |name: &str, ops: OpCount| StageCost { name: name.to_string(), ops, flops: ops.flops(convention) };
    let encode = vec![
        stage("wavelet_analysis", transform),
        stage("patch_projection", projections),
        stage("encoder", trunk_ops),
        stage("sensing", sense),
    ];
    let decode = vec![
        stage("recovery", recover),
        stage("decoder", trunk_ops),
        stage("patch_reconstruction", inverse),
        stage("wavelet_synthesis", transform),
    ];
    let sum = |v: &[StageCost]| v.iter().map(|s| s.flops).sum::<u64>();
    let all_ops = encode.iter().chain(&decode).fold(OpCount::default(), |a, s| a.add(s.ops));
    let other = match convention {
        FlopConvention::MacAsOne => FlopConvention::MacAsTwo,
        FlopConvention::MacAsTwo => FlopConvention::MacAsOne,
    };
    let (encode_flops, decode_flops) = (sum(&encode), sum(&decode));
    let params = config.param_breakdown();
    Ok(CostReport {
        input_shape,
        latent_shape: [grid.rows(), grid.h, grid.w, config.d],
        convention,
        total_params: params.total(),
        params,
        encode_flops,
        decode_flops,
        total_flops: encode_flops + decode_flops,
        total_tflops: (encode_flops + decode_flops) as f64 / 1e12,
        alternate_total_flops: all_ops.flops(other),
        encode,
        decode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_cases() {
        let x = Tensor::<f64>::uniform(&[2, 3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        // 0.1 error on the [0, 1] scale is 0.2 on [-1, 1]
        let y = x.map(|v| v + 0.2);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        let z = Tensor::<f64>::uniform(&[2, 3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mse: f64 = x.data().iter().zip(z.data()).map(|(a, b)| ((a + 1.0) / 2.0 - (b + 1.0) / 2.0).powi(2)).sum::<f64>() / 24.0;
        assert!((psnr(&x, &z).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        assert!(psnr(&x, &Tensor::zeros(&[3, 2, 4])).is_err());
    }

    #[test]
    fn metric_serialization() {
        #[derive(Serialize)]
        struct R {
            #[serde(serialize_with = "serialize_metric")]
            v: f64,
        }
        assert_eq!(serde_json::to_string(&R { v: f64::INFINITY }).unwrap(), r#"{"v":"inf"}"#);
        assert_eq!(serde_json::to_string(&R { v: 1.5 }).unwrap(), r#"{"v":1.5}"#);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let x = Tensor::<f64>::uniform(&[2, 16, 16, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        // y = 1 - x on [0, 1] is negation on [-1, 1]
        assert!(ssim(&x, &x.scale(-1.0)).unwrap() < 1.0);
        assert!(matches!(ssim(&Tensor::<f64>::zeros(&[1, 10, 16, 3]), &Tensor::zeros(&[1, 10, 16, 3])), Err(Error::Input(_))));
    }

    /// Direct 2D windowed evaluation (no separability, explicit loops).
    fn ssim_direct(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let g1 = gaussian_window();
        let mut total = 0.0;
        let mut n = 0;
        for r in 0..=h - 11 {
            for c in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = g1[i] * g1[j];
                        let (a, b) = (x[(r + i) * w + c + j], y[(r + i) * w + c + j]);
                        mx += wgt * a;
                        my += wgt * b;
                        sxx += wgt * a * a;
                        syy += wgt * b * b;
                        sxy += wgt * a * b;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + 1e-4) * (2.0 * cxy + 9e-4)) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn ssim_matches_direct_windowing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = Tensor::<f64>::uniform(&[16 * 20], 0.5, &mut rng).data().iter().map(|v| v + 0.5).collect();
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| (v * 0.8 + 0.1 * ((i % 7) as f64 / 7.0)).clamp(0.0, 1.0)).collect();
        let fast = ssim_plane(&x, &y, 16, 20).unwrap();
        assert!((fast - ssim_direct(&x, &y, 16, 20)).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_reference_fixture() {
        // x[i, j] = ((i * 16 + j) * 37 % 256) / 255, y[i, j] = clip(x + 0.05 * sin(i + 2j), 0, 1);
        // reference value from skimage.metrics.structural_similarity(gaussian_weights=True,
        // sigma=1.5, use_sample_covariance=False, data_range=1), matching a numpy valid-window evaluation
        let x: Vec<f64> = (0..256).map(|k| ((k * 37) % 256) as f64 / 255.0).collect();
        let y: Vec<f64> = (0..256)
            .map(|k| {
                let (i, j) = ((k / 16) as f64, (k % 16) as f64);
                (x[k] + 0.05 * (i + 2.0 * j).sin()).clamp(0.0, 1.0)
            })
            .collect();
        let got = ssim_plane(&x, &y, 16, 16).unwrap();
        assert!((got - SSIM_FIXTURE).abs() < 1e-6, "{got}");
    }

    const SSIM_FIXTURE: f64 = 0.9927019387476856;

    #[test]
    fn default_cost_bounds() {
        let cfg = ModelConfig::default();
        let r = cost_model(&cfg, [17, 768, 768, 3]).unwrap();
        assert_eq!(r.total_params, 39_462_852);
        assert!((1.2..=2.6).contains(&r.total_tflops), "{}", r.total_tflops);
        assert_eq!(r.total_flops, r.encode_flops + r.decode_flops);
        assert_eq!(r.encode_flops, r.encode.iter().map(|s| s.flops).sum::<u64>());
        assert_eq!(r.latent_shape, [5, 96, 96, 4]);
        let strict = cost_model_with(&cfg, [17, 768, 768, 3], FlopConvention::MacAsTwo).unwrap();
        assert_eq!(strict.total_flops, r.alternate_total_flops);
        assert_eq!(strict.alternate_total_flops, r.total_flops);
    }

    #[test]
    fn cost_scaling() {
        let cfg = ModelConfig::default();
        let a = cost_model(&cfg, [17, 256, 256, 3]).unwrap().total_flops as f64;
        let b = cost_model(&cfg, [17, 512, 512, 3]).unwrap().total_flops as f64;
        assert!((b / a / 4.0 - 1.0).abs() < 0.01);
        // linear in frame count once the image row is removed
        let t = |f| cost_model(&cfg, [f, 64, 64, 3]).unwrap().total_flops as f64;
        let (t1, t5, t9) = (t(1), t(5), t(9));
        assert!(((t9 - t5) - (t5 - t1)).abs() < 1e-6 * t9);
        assert!(cost_model(&cfg, [16, 64, 64, 3]).is_err());
    }
}
