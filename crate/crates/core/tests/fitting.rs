use mpi_core::fit::fit_mpi_with;
use mpi_core::synthetic::{synthetic_scene, SyntheticOptions};
use mpi_core::{fit_mpi, materialize, FitConfig, Parallelism};

fn small_scene() -> mpi_core::synthetic::SyntheticScene {
    synthetic_scene(&SyntheticOptions {
        width: 24,
        height: 20,
        planes: 6,
        focal: 24.0,
        views: 4,
        num_points: 25,
        ..Default::default()
    })
    .unwrap()
}

fn config(steps: usize) -> FitConfig {
    FitConfig {
        steps,
        planes: 6,
        ..Default::default()
    }
}

#[test]
fn serial_fit_is_deterministic() {
    let scene = small_scene();
    let (pa, ra) = fit_mpi(&scene.frames, 0, &config(12), Parallelism::Serial).unwrap();
    let (pb, rb) = fit_mpi(&scene.frames, 0, &config(12), Parallelism::Serial).unwrap();
    assert_eq!(pa, pb);
    assert!(ra.same_trajectory(&rb));
}

#[test]
fn parallel_fit_matches_serial() {
    let scene = small_scene();
    let (pa, ra) = fit_mpi(&scene.frames, 0, &config(6), Parallelism::Serial).unwrap();
    let (pb, rb) = fit_mpi(&scene.frames, 0, &config(6), Parallelism::Parallel).unwrap();
    assert_eq!(pa, pb);
    assert!(ra.same_trajectory(&rb));
}

#[test]
fn seed_changes_target_order() {
    let scene = small_scene();
    let (_, a) = fit_mpi(&scene.frames, 0, &config(6), Parallelism::Serial).unwrap();
    let (_, b) = fit_mpi(&scene.frames, 0, &FitConfig { seed: 99, ..config(6) }, Parallelism::Serial).unwrap();
    assert!(!a.same_trajectory(&b));
}

#[test]
fn larger_steps_reduce_training_loss() {
    let scene = small_scene();
    let cfg = FitConfig {
        learning_rate: 0.05,
        ..config(60)
    };
    let (_, report) = fit_mpi(&scene.frames, 0, &cfg, Parallelism::Serial).unwrap();
    let head: f64 = report.history[..3].iter().map(|l| l.total).sum();
    let tail: f64 = report.history[report.history.len() - 3..].iter().map(|l| l.total).sum();
    assert!(tail < 0.8 * head, "{head} -> {tail}");
}

#[test]
fn snapshots_follow_the_schedule() {
    let scene = small_scene();
    let cfg = FitConfig {
        snapshot_every: 3,
        ..config(10)
    };
    let mut seen = Vec::new();
    let source = scene.frames[0].image.clone();
    fit_mpi_with(&scene.frames, 0, &cfg, Parallelism::Serial, |step, params| {
        materialize(params, &source)?;
        seen.push(step);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, [3, 6, 9]);
}

#[test]
fn no_scale_keeps_sigma_at_one() {
    let scene = small_scene();
    let cfg = FitConfig {
        use_scale: false,
        ..config(4)
    };
    let (_, report) = fit_mpi(&scene.frames, 0, &cfg, Parallelism::Serial).unwrap();
    assert!(report.sigma_history.iter().all(|&s| s == 1.0));
}

#[test]
fn source_index_out_of_range_is_rejected() {
    let scene = small_scene();
    assert!(fit_mpi(&scene.frames, 9, &config(2), Parallelism::Serial).is_err());
}
