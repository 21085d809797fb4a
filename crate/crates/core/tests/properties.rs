//! Property tests for the invariants of the numerical core, color handling,
//! warping, matching, fusion and evaluation.

mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;

use colorprop::color::{psnr_lab, rgb_to_gray, rgb_to_yuv, yuv_to_rgb_unclamped, ColorSpace, Image};
use colorprop::fusion::{FusionConfig, FusionNet};
use colorprop::global::{
    match_coarse, match_fine, BuiltinExtractor, CorrespondenceField, FeatureExtractor, FeatureLevel, FeatureMap,
};
use colorprop::local::{apply_separable_kernels, KernelField};
use colorprop::pipeline::{average_first, evaluate, HORIZONS};
use colorprop::tensor::{conv2d, denormalize, instance_normalize, softmax, ConvSpec, Padding, Tensor};
use common::conv_oracle;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, space: ColorSpace, lo: f32, hi: f32) -> Image {
    Image::from_fn(h, w, space, |_, _, _| rng.random_range(lo..hi))
}

fn random_field(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> KernelField {
    let logits = random_tensor(rng, &[1, h, w, k], -3.0, 3.0);
    let kv = softmax(&logits, 3).unwrap();
    let logits = random_tensor(rng, &[1, h, w, k], -3.0, 3.0);
    let kh = softmax(&logits, 3).unwrap();
    let f32s = |t: &Tensor<f64>| t.data().iter().map(|&v| v as f32).collect();
    KernelField::new(h, w, k, f32s(&kv), f32s(&kh)).unwrap()
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn gray_scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let (fy, fx, p) = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.0..6.0));
    Image::from_fn(h, w, ColorSpace::Gray, |y, x, _| {
        0.5 + 0.3 * ((y as f32 * fy + p).sin() * (x as f32 * fx).cos()) + rng.random_range(-0.05..0.05)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_matches_direct_summation(
        seed in any::<u64>(),
        n in 1usize..=2, h in 1usize..=9, w in 1usize..=9, cin in 1usize..=3, cout in 1usize..=3,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..=2, dilation in 1usize..=2, zero in any::<bool>(),
    ) {
        let mut r = rng(seed);
        let spec = ConvSpec { stride, dilation, padding: if zero { Padding::Zero } else { Padding::Replicate } };
        let x = random_tensor(&mut r, &[n, h, w, cin], -1.0, 1.0);
        let wt = random_tensor(&mut r, &[k, k, cin, cout], -1.0, 1.0);
        let b = random_tensor(&mut r, &[cout], -1.0, 1.0);
        let got = conv2d(&x, &wt, &b, spec).unwrap();
        let want = conv_oracle(&x, &wt, &b, spec);
        prop_assert_eq!(got.len(), want.len());
        for (g, o) in got.data().iter().zip(&want) {
            prop_assert!((g - o).abs() <= 1e-12, "64-bit {} vs {}", g, o);
        }
        let got32 = conv2d(&x.cast::<f32>(), &wt.cast::<f32>(), &b.cast::<f32>(), spec).unwrap();
        for (g, o) in got32.data().iter().zip(&want) {
            // 1e-6 relative to the magnitude of the accumulated terms.
            let scale = (k * k * cin) as f64;
            prop_assert!((*g as f64 - o).abs() <= 1e-6 * scale, "32-bit {} vs {}", g, o);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        seed in any::<u64>(), len in 1usize..=9, axis in 0usize..3, shift in -50.0f64..50.0,
    ) {
        let mut r = rng(seed);
        let mut shape = vec![2, 3, 4];
        shape[axis] = len;
        let x = random_tensor(&mut r, &shape, -20.0, 20.0);
        let y = softmax(&x, axis).unwrap();
        let (outer, inner) = (shape[..axis].iter().product::<usize>(), shape[axis + 1..].iter().product::<usize>());
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|j| y.data()[(o * len + j) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }
        let shifted = softmax(&x.map(|v| v + shift), axis).unwrap();
        prop_assert!(shifted.max_abs_diff(&y) <= 1e-12);
        let y32 = softmax(&x.cast::<f32>(), axis).unwrap();
        for o in 0..outer {
            for i in 0..inner {
                let s: f32 = (0..len).map(|j| y32.data()[(o * len + j) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn instance_norm_then_denormalize_is_identity(
        seed in any::<u64>(), n in 1usize..=2, h in 1usize..=6, w in 2usize..=6, c in 1usize..=4,
        scale in 0.01f64..10.0, offset in -5.0f64..5.0,
    ) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[n, h, w, c], -1.0, 1.0).map(|v| v * scale + offset);
        let (y, stats) = instance_normalize(&x).unwrap();
        let back = denormalize(&y, &stats).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-5);
        let x32 = x.cast::<f32>();
        let (y32, stats32) = instance_normalize(&x32).unwrap();
        let back32 = denormalize(&y32, &stats32).unwrap();
        prop_assert!(back32.max_abs_diff(&x32) as f64 <= 1e-5 * (1.0 + offset.abs() + scale));
    }

    #[test]
    fn psnr_is_symmetric_and_falls_with_noise(seed in any::<u64>(), h in 2usize..=12, w in 2usize..=12) {
        let mut r = rng(seed);
        let gt = random_image(&mut r, h, w, ColorSpace::Rgb, 0.2, 0.8);
        let noise: Vec<f32> = (0..h * w * 3).map(|_| StandardNormal.sample(&mut r)).collect();
        let noisy = |sigma: f32| {
            let data = gt.data().iter().zip(&noise).map(|(g, e)| (g + sigma * e).clamp(0.0, 1.0)).collect();
            Image::new(h, w, ColorSpace::Rgb, data).unwrap()
        };
        let mut last = f64::INFINITY;
        for sigma in [0.01, 0.02, 0.05] {
            let pred = noisy(sigma);
            let p = psnr_lab(&pred, &gt).unwrap();
            prop_assert_eq!(p, psnr_lab(&gt, &pred).unwrap());
            prop_assert!(p < last, "PSNR {} at sigma {} after {}", p, sigma, last);
            last = p;
        }
    }

    #[test]
    fn constant_images_survive_any_kernel_field(
        seed in any::<u64>(), h in 1usize..=10, w in 1usize..=10, k in prop::sample::select(vec![1usize, 3, 7, 21]),
        pixel in prop::array::uniform3(0.0f32..1.0),
    ) {
        let mut r = rng(seed);
        let field = random_field(&mut r, h, w, k);
        prop_assert!(field.check_normalized(1e-5).is_ok());
        let img = Image::filled(h, w, ColorSpace::Rgb, &pixel);
        let out = apply_separable_kernels(&img, &field).unwrap();
        prop_assert!(max_diff(out.data(), img.data()) <= 1e-5);
    }

    #[test]
    fn warping_is_linear(
        seed in any::<u64>(), h in 1usize..=10, w in 1usize..=10, a in -2.0f32..2.0, b in -2.0f32..2.0,
    ) {
        let mut r = rng(seed);
        let field = random_field(&mut r, h, w, 7);
        let x = random_image(&mut r, h, w, ColorSpace::Rgb, 0.0, 1.0);
        let y = random_image(&mut r, h, w, ColorSpace::Rgb, 0.0, 1.0);
        let mix = Image::from_fn(h, w, ColorSpace::Rgb, |yy, xx, c| a * x.get(yy, xx, c) + b * y.get(yy, xx, c));
        let lhs = apply_separable_kernels(&mix, &field).unwrap();
        let (wx, wy) = (apply_separable_kernels(&x, &field).unwrap(), apply_separable_kernels(&y, &field).unwrap());
        let rhs: Vec<f32> = wx.data().iter().zip(wy.data()).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(max_diff(lhs.data(), &rhs) <= 1e-5);
    }

    #[test]
    fn fine_matches_stay_inside_the_reference(seed in any::<u64>(), h in 1usize..=24, w in 1usize..=24) {
        let mut r = rng(seed);
        let ex = BuiltinExtractor { coarse_ratio: 4 };
        let (target, reference) = (gray_scene(&mut r, h, w), gray_scene(&mut r, h, w));
        let tc = ex.extract(&target, 2, FeatureLevel::Coarse).unwrap();
        let rc = ex.extract(&reference, 1, FeatureLevel::Coarse).unwrap();
        let coarse = match_coarse(&tc, &rc).unwrap();
        let tf = ex.extract(&target, 2, FeatureLevel::Fine).unwrap();
        let rf = ex.extract(&reference, 1, FeatureLevel::Fine).unwrap();
        let margin = r.random_range(0..3);
        let field = match_fine(&tf, &rf, &coarse, margin).unwrap();
        prop_assert_eq!((field.height(), field.width()), (h, w));
        prop_assert!(field.sources().iter().all(|&(y, x)| y < h && x < w));
        let again = match_fine(&tf, &rf, &match_coarse(&tc, &rc).unwrap(), margin).unwrap();
        prop_assert_eq!(field.sources(), again.sources());
    }

    #[test]
    fn feature_grids_follow_their_stride(
        seed in any::<u64>(), h in 1usize..=40, w in 1usize..=40, ratio in 4usize..=9,
    ) {
        let mut r = rng(seed);
        let img = gray_scene(&mut r, h, w);
        let ex = BuiltinExtractor { coarse_ratio: ratio };
        let coarse = ex.extract(&img, 1, FeatureLevel::Coarse).unwrap();
        prop_assert_eq!(coarse.stride(), ratio);
        prop_assert_eq!((coarse.height(), coarse.width()), (h.div_ceil(ratio), w.div_ceil(ratio)));
        let fine = ex.extract(&img, 1, FeatureLevel::Fine).unwrap();
        prop_assert_eq!(fine.stride(), 1);
        prop_assert_eq!((fine.height(), fine.width()), (h, w));
        prop_assert_eq!(ex.extract(&img, 1, FeatureLevel::Coarse).unwrap(), coarse);
        prop_assert_eq!(ex.extract(&img, 1, FeatureLevel::Fine).unwrap(), fine);
    }

    #[test]
    fn coarse_matching_ignores_positive_affine_rescaling(
        seed in any::<u64>(), th in 1usize..=6, tw in 1usize..=6, rh in 1usize..=6, rw in 1usize..=6,
        a in prop::sample::select(vec![0.25f32, 0.5, 2.0, 3.0, 8.0]), b in -64i32..64,
    ) {
        // Descriptors on a 1/64 grid keep every transformed value and every
        // distance exact, so any argmin change would be a real violation.
        let mut r = rng(seed);
        let depth = 10;
        let grid = |r: &mut ChaCha8Rng, n: usize| -> Vec<f32> { (0..n).map(|_| r.random_range(0..64) as f32 / 64.0).collect() };
        let t = grid(&mut r, th * tw * depth);
        let rf = grid(&mut r, rh * rw * depth);
        let map = |h, w, d: Vec<f32>| FeatureMap::new(FeatureLevel::Coarse, h, w, depth, 8, d).unwrap();
        let affine = |d: &[f32]| d.iter().map(|&v| a * v + b as f32 / 64.0).collect::<Vec<_>>();
        let base = match_coarse(&map(th, tw, t.clone()), &map(rh, rw, rf.clone())).unwrap();
        let moved = match_coarse(&map(th, tw, affine(&t)), &map(rh, rw, affine(&rf))).unwrap();
        prop_assert_eq!(base.sources(), moved.sources());
    }

    #[test]
    fn evaluation_averages_recompute(seed in any::<u64>(), frames in 1usize..=14) {
        let mut r = rng(seed);
        let gt: Vec<Image> = (0..frames).map(|_| random_image(&mut r, 3, 4, ColorSpace::Rgb, 0.0, 1.0)).collect();
        let pred: Vec<Image> = gt
            .iter()
            .map(|g| Image::from_fn(3, 4, ColorSpace::Rgb, |y, x, c| (g.get(y, x, c) + r.random_range(-0.1..0.1)).clamp(0.0, 1.0)))
            .collect();
        let report = evaluate(&pred, &gt, "noisy").unwrap();
        prop_assert_eq!(report.per_frame.len(), frames);
        prop_assert_eq!(report.averages.len(), HORIZONS.len());
        for &(n, avg) in &report.averages {
            let end = n.min(frames);
            if end < 2 {
                prop_assert!(avg.is_nan());
                continue;
            }
            let mut sum = 0.0;
            for k in 1..end {
                sum += psnr_lab(&pred[k], &gt[k]).unwrap();
            }
            prop_assert!((avg - sum / (end - 1) as f64).abs() <= 1e-9);
            prop_assert_eq!(avg, average_first(&report.per_frame, n));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn fusion_preserves_dimensions(seed in any::<u64>(), h in 16usize..=24, w in 16usize..=24) {
        let mut r = rng(seed);
        let net = FusionNet::<f32>::new(FusionConfig::default(), seed).unwrap();
        let gk = random_image(&mut r, h, w, ColorSpace::Gray, 0.0, 1.0);
        let iw = random_image(&mut r, h, w, ColorSpace::Rgb, 0.0, 1.0);
        let is = random_image(&mut r, h, w, ColorSpace::Rgb, 0.0, 1.0);
        let out = net.fuse(&gk, &iw, &is).unwrap();
        prop_assert_eq!((out.dims(), out.channels(), out.space()), ((h, w), 3, ColorSpace::Rgb));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let yuv = net.fuse_yuv(&gk, &iw, &is).unwrap();
        prop_assert_eq!(yuv.channel(0), gk.data().to_vec());
    }
}

#[test]
fn yuv_roundtrip_on_ten_thousand_pixels() {
    let mut r = rng(3);
    let img = random_image(&mut r, 100, 100, ColorSpace::Rgb, 0.0, 1.0);
    let yuv = rgb_to_yuv(&img).unwrap();
    let back = yuv_to_rgb_unclamped(&yuv).unwrap();
    assert!(max_diff(back.data(), img.data()) <= 1e-5);
    let gray = rgb_to_gray(&img).unwrap();
    let luma = yuv.channel(0);
    assert!(luma.iter().zip(gray.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn image_channel_counts_follow_the_space() {
    for (space, channels) in [
        (ColorSpace::Gray, 1),
        (ColorSpace::Rgb, 3),
        (ColorSpace::Yuv, 3),
        (ColorSpace::Lab, 3),
    ] {
        assert_eq!(space.channels(), channels);
        assert!(Image::new(2, 2, space, vec![0.5; 4 * channels]).is_ok());
        assert!(Image::new(2, 2, space, vec![0.5; 4 * channels + 1]).is_err());
    }
    let rgb = Image::new(1, 2, ColorSpace::Rgb, vec![-0.5, 0.2, 1.5, 0.0, 1.0, 2.0]).unwrap().clamp01();
    assert_eq!(rgb.data(), &[0.0, 0.2, 1.0, 0.0, 1.0, 1.0]);
}

#[test]
fn correspondences_outside_the_reference_are_rejected() {
    assert!(CorrespondenceField::new(1, 2, 3, 3, vec![(0, 0), (2, 2)]).is_ok());
    assert!(CorrespondenceField::new(1, 2, 3, 3, vec![(0, 0), (3, 0)]).is_err());
    assert!(CorrespondenceField::new(1, 2, 3, 3, vec![(0, 0), (0, 3)]).is_err());
    assert!(CorrespondenceField::new(1, 2, 3, 3, vec![(0, 0)]).is_err());
}

#[test]
fn kernel_fields_must_be_normalized() {
    let mut r = rng(5);
    assert!(random_field(&mut r, 3, 4, 5).check_normalized(1e-5).is_ok());
    let mut v = vec![0.2f32; 3 * 4 * 5];
    v[7] = 0.3;
    let bad = KernelField::new(3, 4, 5, v, vec![0.2; 60]).unwrap();
    assert!(bad.check_normalized(1e-5).is_err());
    let negative = KernelField::new(1, 1, 3, vec![-0.5, 1.0, 0.5], vec![0.0, 1.0, 0.0]).unwrap();
    assert!(negative.check_normalized(1e-5).is_err());
    assert!(KernelField::new(1, 1, 4, vec![0.25; 4], vec![0.25; 4]).is_err());
}
