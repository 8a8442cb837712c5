mod common;

use common::{random_image, random_params, random_points, random_target, reference_camera, rng};
use mpi_core::io::{load_mpi, save_mpi};
use mpi_core::render::compositing_weights;
use mpi_core::{
    composite_over, compute_scale, disparity_map, materialize, psnr, render_view, ssim, Mpi,
};
use proptest::prelude::*;

fn mpi_from_seed(w: usize, h: usize, d: usize, seed: u64) -> Mpi {
    let mut r = rng(seed);
    let params = random_params(w, h, d, 0.5, &mut r);
    materialize(&params, &random_image(w, h, 3, &mut r)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn compositing_weights_sum_to_one(d in 2usize..12, seed in any::<u64>()) {
        let mpi = mpi_from_seed(6, 5, d, seed);
        let weights = compositing_weights(mpi.alphas());
        for p in 0..30 {
            let s: f64 = weights.iter().map(|w| w.as_slice()[p]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_view_render_is_compositing(d in 2usize..8, seed in any::<u64>(), sigma in 0.2f64..5.0) {
        let mpi = mpi_from_seed(9, 7, d, seed);
        let direct = composite_over(mpi.colors(), mpi.alphas()).unwrap();
        let rendered = render_view(&mpi, mpi.reference(), sigma).unwrap();
        prop_assert!(rendered.max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn rendered_values_stay_in_unit_range(d in 2usize..8, seed in any::<u64>()) {
        let mpi = mpi_from_seed(10, 8, d, seed);
        let target = random_target(mpi.reference(), 0.5, &mut rng(seed ^ 1));
        let img = render_view(&mpi, &target, 1.0).unwrap();
        prop_assert!(img.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn scaling_the_world_scales_sigma_and_keeps_renders(seed in any::<u64>(), k in 0.1f64..10.0) {
        let mpi = mpi_from_seed(10, 8, 4, seed);
        let mut r = rng(seed ^ 2);
        let points = random_points(10, 8, 12, &mut r);
        let target = random_target(mpi.reference(), 0.3, &mut r);
        let sigma = compute_scale(&disparity_map(&mpi), &points).unwrap().value();
        let scaled = compute_scale(&disparity_map(&mpi), &points.scaled(k)).unwrap().value();
        prop_assert!((scaled / (k * sigma) - 1.0).abs() < 1e-12);
        let a = render_view(&mpi, &target, sigma).unwrap();
        let b = render_view(&mpi, &target.with_scaled_translation(k), scaled).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn disparity_lies_between_plane_disparities(d in 2usize..10, seed in any::<u64>()) {
        let mpi = mpi_from_seed(7, 6, d, seed);
        let (lo, hi) = disparity_map(&mpi).min_max();
        prop_assert!(lo >= 1.0 / mpi.planes().far() - 1e-15);
        prop_assert!(hi <= 1.0 / mpi.planes().near() + 1e-15);
    }

    #[test]
    fn metrics_are_symmetric_and_maximal_on_identity(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_image(16, 14, 3, &mut r);
        let b = random_image(16, 14, 3, &mut r);
        prop_assert_eq!(psnr(&a, &b, None, 0.6).unwrap(), psnr(&b, &a, None, 0.6).unwrap());
        prop_assert!((ssim(&a, &b, None, 0.6).unwrap() - ssim(&b, &a, None, 0.6).unwrap()).abs() < 1e-12);
        prop_assert_eq!(psnr(&a, &a, None, 0.6).unwrap(), 99.0);
        prop_assert!((ssim(&a, &a, None, 0.6).unwrap() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn archive_round_trip_within_quantization(d in 2usize..6, seed in any::<u64>()) {
        let mpi = mpi_from_seed(16, 16, d, seed);
        let dir = tempfile::tempdir().unwrap();
        save_mpi(&mpi, dir.path()).unwrap();
        let back = load_mpi(dir.path()).unwrap();
        prop_assert_eq!(back.planes(), mpi.planes());
        prop_assert_eq!(back.reference(), mpi.reference());
        for (x, y) in mpi.colors().iter().zip(back.colors()).chain(mpi.alphas().iter().zip(back.alphas())) {
            prop_assert!(x.max_abs_diff(y) <= 1.0 / 65535.0);
        }
    }
}

#[test]
fn reference_camera_renders_identity_at_any_sigma() {
    let mpi = mpi_from_seed(8, 8, 3, 5);
    let a = render_view(&mpi, &reference_camera(8, 8), 0.5).unwrap();
    let b = render_view(&mpi, &reference_camera(8, 8), 7.0).unwrap();
    assert_eq!(a, b);
}
