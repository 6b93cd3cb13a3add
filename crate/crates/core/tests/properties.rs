//! Cross-module invariants as property tests.

mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rrsr::config::{parse_override, resolve, RunConfig};
use rrsr::data::{degrade, make_train_sample, synthetic, Augment, SampleOptions};
use rrsr::eval::{evaluate, BicubicUpscaler};
use rrsr::geometry::{
    box_corners, make_perspective_pair, sample_vertex_offsets, solve_homography, warp_perspective, Homography,
    PerturbationRange,
};
use rrsr::imaging::{bicubic_resize, psnr, rgb_to_y, ssim, ColorSpace, ImageBuffer, Scale, ValueRange, PSNR_PEAK};
use rrsr::matching::match_features;
use rrsr::network::{NetworkConfig, RefSr};
use rrsr::selftest::{degenerate_deformable, kernel_mixing};
use rrsr::tensor::ParamStore;
use rrsr::training::{rtrr_step, Batch, Extras, LossWeights, RtrrGradient, StepOptions};

fn luma(h: usize, w: usize) -> impl Strategy<Value = ImageBuffer> {
    prop::collection::vec(0.0f32..255.0, h * w)
        .prop_map(move |d| ImageBuffer::new(h, w, ColorSpace::Y, ValueRange::Byte, d).unwrap())
}

fn rgb_unit(h: usize, w: usize) -> impl Strategy<Value = ImageBuffer> {
    prop::collection::vec(0.0f32..=1.0, h * w * 3)
        .prop_map(move |d| ImageBuffer::new(h, w, ColorSpace::Rgb, ValueRange::Unit, d).unwrap())
}

fn sized<S: Strategy, F: Fn(usize, usize) -> S>(lo: usize, hi: usize, f: F) -> impl Strategy<Value = S::Value> {
    (lo..=hi, lo..=hi).prop_flat_map(move |(h, w)| f(h, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psnr_is_symmetric((a, b) in sized(2, 12, |h, w| (luma(h, w), luma(h, w)))) {
        let ab = psnr(&a, &b, PSNR_PEAK).unwrap();
        prop_assert_eq!(ab.to_bits(), psnr(&b, &a, PSNR_PEAK).unwrap().to_bits());
    }

    #[test]
    fn psnr_ignores_a_shared_permutation((a, b) in sized(2, 10, |h, w| (luma(h, w), luma(h, w))), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..a.data().len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let perm = |img: &ImageBuffer| {
            let d = idx.iter().map(|&i| img.data()[i]).collect();
            ImageBuffer::new(img.height(), img.width(), ColorSpace::Y, ValueRange::Byte, d).unwrap()
        };
        let before = psnr(&a, &b, PSNR_PEAK).unwrap();
        let after = psnr(&perm(&a), &perm(&b), PSNR_PEAK).unwrap();
        prop_assert!((before - after).abs() <= 1e-9 * before.abs().max(1.0));
    }

    #[test]
    fn ssim_of_an_image_with_itself_is_one(a in sized(11, 18, luma)) {
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn luma_stays_in_studio_range(img in sized(1, 8, rgb_unit)) {
        let y = rgb_to_y(&img).unwrap();
        prop_assert!(y.data().iter().all(|&v| (16.0 - 1e-4..=235.0 + 1e-4).contains(&v)));
    }

    #[test]
    fn bicubic_keeps_constants(v in 0.0f32..1.0, h in 4usize..13, w in 4usize..13, pick in 0usize..5) {
        let scale = [Scale::up(4), Scale::up(2), Scale::down(2), Scale::down(4), Scale::new(3, 2).unwrap()][pick];
        let img = ImageBuffer::filled(4 * h, 4 * w, ColorSpace::Rgb, ValueRange::Unit, v).unwrap();
        let out = bicubic_resize(&img, scale).unwrap();
        prop_assert!(out.data().iter().all(|&x| (x - v).abs() < 1e-5));
    }

    #[test]
    fn vertex_offsets_stay_in_band(seed in any::<u64>()) {
        let r = PerturbationRange::DEFAULT;
        let offsets = sample_vertex_offsets(&mut ChaCha8Rng::seed_from_u64(seed), r);
        for o in offsets {
            for m in o {
                prop_assert!((r.lo()..=r.hi()).contains(&m.abs()), "{m}");
            }
        }
    }

    #[test]
    fn homography_fits_its_four_points(seed in any::<u64>(), size in 16usize..400) {
        let src = box_corners(size, size);
        let offsets = sample_vertex_offsets(&mut ChaCha8Rng::seed_from_u64(seed), PerturbationRange::DEFAULT);
        let mut dst = src;
        for (d, o) in dst.iter_mut().zip(&offsets) {
            d[0] += o[0];
            d[1] += o[1];
        }
        let h = solve_homography(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let p = h.apply(*s);
            prop_assert!((p[0] - d[0]).abs() <= 1e-8 && (p[1] - d[1]).abs() <= 1e-8);
        }
    }

    #[test]
    fn lr_and_hr_homographies_commute_with_scaling(seed in any::<u64>()) {
        let hr = synthetic::smooth_scene(48, 48, seed);
        let lr = degrade(&hr).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = make_perspective_pair(&lr, &hr, &mut rng, PerturbationRange::DEFAULT).unwrap();
        let s_inv = Homography::scaling(0.25);
        let lhs = pair.h_lr.compose(&s_inv).matrix();
        let rhs = s_inv.compose(&pair.h_hr).matrix();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((lhs[i][j] - rhs[i][j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn warping_a_constant_is_a_no_op(seed in any::<u64>(), v in 0.0f32..1.0) {
        let img = ImageBuffer::filled(24, 20, ColorSpace::Rgb, ValueRange::Unit, v).unwrap();
        let src = box_corners(24, 20);
        let offsets = sample_vertex_offsets(&mut ChaCha8Rng::seed_from_u64(seed), PerturbationRange::DEFAULT);
        let mut dst = src;
        for (d, o) in dst.iter_mut().zip(&offsets) {
            d[0] += o[0];
            d[1] += o[1];
        }
        let out = warp_perspective(&img, &solve_homography(&src, &dst).unwrap()).unwrap();
        prop_assert!(out.data().iter().all(|&x| (x - v).abs() < 1e-6));
    }

    #[test]
    fn train_lr_is_the_exact_quarter(seed in any::<u64>()) {
        let opts = SampleOptions { patch: 32, augment: true, crop_reference: true };
        let hr = synthetic::texture(44, 40, seed);
        let r = synthetic::texture(36, 48, seed ^ 1);
        let s = make_train_sample(&hr, &r, &mut ChaCha8Rng::seed_from_u64(seed), opts).unwrap();
        let q = bicubic_resize(&s.x_hr, Scale::down(4)).unwrap();
        prop_assert_eq!(psnr(&q, &s.x_lr, PSNR_PEAK).unwrap(), f64::INFINITY);
        let qy = bicubic_resize(&s.y_hr, Scale::down(4)).unwrap();
        prop_assert_eq!(psnr(&qy, &s.y_lr, PSNR_PEAK).unwrap(), f64::INFINITY);
    }

    #[test]
    fn augmentation_inverts_exactly(img in sized(1, 9, rgb_unit), seed in any::<u64>()) {
        let a = Augment::sample(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a.invert(&a.apply(&img)), img);
    }

    #[test]
    fn matches_land_inside_the_reference(seed in any::<u64>(), h in 3usize..9, w in 3usize..9, rh in 3usize..9, rw in 3usize..9) {
        let m = match_features(&common::random_features(2, h, w, seed), &common::random_features(2, rh, rw, !seed), 3, None).unwrap();
        prop_assert!(m.in_bounds());
    }

    #[test]
    fn matcher_equals_brute_force(seed in any::<u64>(), h in 3usize..8, w in 3usize..8, rh in 3usize..8, rw in 3usize..8, c in 1usize..4) {
        let lr = common::random_features(c, h, w, seed);
        let r = common::random_features(c, rh, rw, seed.wrapping_add(1));
        prop_assert_eq!(match_features(&lr, &r, 3, None).unwrap(), common::brute_match(&lr, &r, 3));
    }

    #[test]
    fn matching_is_translation_equivariant(seed in any::<u64>(), sy in 0usize..3, sx in 0usize..3, ty in 0usize..3, tx in 0usize..3) {
        let (h, w) = (12, 12);
        let r = common::random_features(2, h, w, seed);
        let lr = common::roll(&r, sy, sx);
        let base = match_features(&lr, &r, 3, None).unwrap();
        let moved = match_features(&common::roll(&lr, ty, tx), &common::roll(&r, ty, tx), 3, None).unwrap();
        // interior: no patch involved in the exact match crosses a wrap seam
        let inner = |v: usize, s: usize, t: usize, n: usize| v >= 1 && v + t + s + 1 < n;
        for y in (0..h).filter(|&y| inner(y, sy, ty, h)) {
            for x in (0..w).filter(|&x| inner(x, sx, tx, w)) {
                prop_assert_eq!(moved.offset(y, x), [sy as i32, sx as i32]);
                prop_assert_eq!(base.offset(y + ty, x + tx), [sy as i32, sx as i32]);
            }
        }
    }

    #[test]
    fn evaluation_ignores_sample_order(seed in any::<u64>()) {
        let samples = rrsr::eval::synthetic(4, 16, 3);
        let mut shuffled = samples.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = evaluate(&BicubicUpscaler, &samples, "s", "c", 0);
        let b = evaluate(&BicubicUpscaler, &shuffled, "s", "c", 0);
        prop_assert_eq!(a.mean_psnr.map(f64::to_bits), b.mean_psnr.map(f64::to_bits));
        prop_assert_eq!(a.mean_ssim.map(f64::to_bits), b.mean_ssim.map(f64::to_bits));
        for row in &b.per_image {
            prop_assert!(a.per_image.contains(row));
        }
    }

    #[test]
    fn resolved_config_round_trips(iters in 1u64..10_000, batch in 1usize..9, lr in 1e-6f64..1e-2, rtrr in 0.0f64..1.0) {
        let sets = vec![
            format!("training.iterations={iters}"),
            format!("training.batch={batch}"),
            format!("training.lr={lr:e}"),
            format!("losses.lambda_rtrr={rtrr:e}"),
        ];
        let cfg = resolve(None, None, &sets).unwrap();
        prop_assert_eq!(cfg.training.iterations, iters);
        let dir = tempfile::tempdir().unwrap();
        let echo = dir.path().join("echo.toml");
        std::fs::write(&echo, cfg.to_toml()).unwrap();
        prop_assert_eq!(resolve(None, Some(&echo), &[]).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn kernel_mixing_is_linear(seed in any::<u64>()) {
        prop_assert!(kernel_mixing::<f32>(3, seed) <= 1e-4);
        prop_assert!(kernel_mixing::<f64>(3, seed) <= 1e-8);
    }

    #[test]
    fn deformable_degenerates_to_conv(seed in any::<u64>()) {
        prop_assert!(degenerate_deformable(2, seed) <= 1e-4);
    }

    #[test]
    fn output_is_four_times_the_input(h in 3usize..9, w in 3usize..9, rh in 3usize..7, rw in 3usize..7, seed in any::<u64>()) {
        let mut store = ParamStore::<f32>::new();
        let model = RefSr::new(&NetworkConfig::tiny(), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let lr = synthetic::texture(h, w, seed);
        let r = synthetic::texture(4 * rh, 4 * rw, seed ^ 7);
        prop_assert_eq!(model.infer(&store, &lr, &r).unwrap().dims(), (4 * h, 4 * w));
    }

    #[test]
    fn total_is_the_weighted_sum(l_rtrr in 0.0f64..2.0, l_rec in 0.1f64..2.0, seed in 0u64..1000) {
        let mut store = ParamStore::<f32>::new();
        let model = RefSr::new(&NetworkConfig::tiny(), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let opts = SampleOptions { patch: 16, augment: false, crop_reference: false };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<_> = synthetic::desk_pairs(2, 16, seed)
            .iter()
            .map(|(hr, r)| make_train_sample(hr, r, &mut rng, opts).unwrap())
            .collect();
        let batch: Batch<f32> = Batch::build(&samples, Some(PerturbationRange::new(1.0, 3.0).unwrap()), &mut rng).unwrap();
        let weights = LossWeights { lambda_rec: l_rec, lambda_rtrr: l_rtrr, ..LossWeights::rec_only() };
        let o = StepOptions { weights, enable_rtrr: true, gradient: RtrrGradient::Full };
        let out = rtrr_step(&model, &store, &batch, &o, &Extras::default(), 1).unwrap();
        let want = out.losses.weighted_sum(&weights);
        prop_assert!((out.losses.total as f64 - want).abs() <= 1e-6 * want.abs().max(1.0));
        prop_assert!(out.audit.shared_params && out.audit.pass2_reference_is_sr);
    }
}

#[test]
fn override_values_parse_as_toml_first() {
    let (path, v) = parse_override("training.lr=1e-3").unwrap();
    assert_eq!(path, ["training", "lr"]);
    assert_eq!(v.as_float(), Some(1e-3));
    assert!(RunConfig::desk().validate().is_ok());
}
