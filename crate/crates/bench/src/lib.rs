//! Fixtures shared by the benchmarks in `benches/`.

use mpi_core::synthetic::{synthetic_scene, SyntheticOptions, SyntheticScene};
use mpi_core::{init_params, FitConfig, MpiParams, Problem, SigmaMode};

/// Synthetic scene of `size x size` pixels with `planes` ground-truth planes.
pub fn scene(size: usize, planes: usize) -> SyntheticScene {
    synthetic_scene(&SyntheticOptions {
        width: size,
        height: size,
        planes,
        focal: size as f64,
        ..Default::default()
    })
    .expect("valid synthetic options")
}

/// Harmonic-init parameters and a single-target problem over `scene`.
pub fn problem(scene: &SyntheticScene, planes: usize) -> (MpiParams, Problem) {
    let source = &scene.frames[scene.source_index];
    let config = FitConfig {
        planes,
        ..Default::default()
    };
    let params = init_params(
        source.image.width(),
        source.image.height(),
        &config,
        &source.camera,
        &source.image,
    )
    .expect("matching source image");
    let target = &scene.frames[1];
    let problem = Problem::new(
        source.image.clone(),
        vec![(target.camera.clone(), target.image.clone())],
        source.points.clone(),
        SigmaMode::Estimated,
    )
    .expect("valid problem");
    (params, problem)
}
