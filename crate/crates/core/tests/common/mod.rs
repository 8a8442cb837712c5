#![allow(dead_code)]

use mpi_core::camera::rotation_from_axis_angle;
use mpi_core::{Camera, ImageGrid, MpiParams, PlaneDepths, Problem, SigmaMode, SparsePointSet};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(w: usize, h: usize, ch: usize, rng: &mut ChaCha8Rng) -> ImageGrid {
    ImageGrid::from_fn(w, h, ch, |_, _, _| rng.gen()).unwrap()
}

pub fn reference_camera(w: usize, h: usize) -> Camera {
    Camera::identity_pose(w as f64, w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap()
}

pub fn random_target(reference: &Camera, baseline: f64, rng: &mut ChaCha8Rng) -> Camera {
    let r = rotation_from_axis_angle(Vector3::new(
        rng.gen_range(-0.02..0.02),
        rng.gen_range(-0.02..0.02),
        rng.gen_range(-0.02..0.02),
    ));
    let t = Vector3::new(
        rng.gen_range(-baseline..baseline),
        rng.gen_range(-baseline..baseline),
        rng.gen_range(-0.3 * baseline..0.3 * baseline),
    );
    Camera::new(reference.fx, reference.fy, reference.cx, reference.cy, r, t).unwrap()
}

/// Random parameters with logits in [-2, 2] and the given background blend.
pub fn random_params(w: usize, h: usize, d: usize, bg_blend: f64, rng: &mut ChaCha8Rng) -> MpiParams {
    MpiParams {
        alpha_logits: (1..d)
            .map(|_| ImageGrid::from_fn(w, h, 1, |_, _, _| rng.gen_range(-2.0..2.0)).unwrap())
            .collect(),
        bg_logits: ImageGrid::from_fn(w, h, 3, |_, _, _| rng.gen_range(-2.0..2.0)).unwrap(),
        planes: PlaneDepths::new(1.0, 10.0, d).unwrap(),
        reference: reference_camera(w, h),
        bg_blend,
    }
}

pub fn random_points(w: usize, h: usize, n: usize, rng: &mut ChaCha8Rng) -> SparsePointSet {
    let triples: Vec<_> = (0..n)
        .map(|_| {
            (
                rng.gen_range(0.0..(w - 1) as f64),
                rng.gen_range(0.0..(h - 1) as f64),
                rng.gen_range(1.5..8.0),
            )
        })
        .collect();
    SparsePointSet::from_triples(&triples).unwrap()
}

/// 8x8-style random scene: source image, `targets` posed random images and
/// `n_points` sparse points.
pub fn random_problem(
    w: usize,
    h: usize,
    targets: usize,
    n_points: usize,
    sigma_mode: SigmaMode,
    rng: &mut ChaCha8Rng,
) -> Problem {
    let reference = reference_camera(w, h);
    let source = random_image(w, h, 3, rng);
    let targets = (0..targets)
        .map(|_| (random_target(&reference, 0.3, rng), random_image(w, h, 3, rng)))
        .collect();
    let points = random_points(w, h, n_points, rng);
    Problem::new(source, targets, points, sigma_mode).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
