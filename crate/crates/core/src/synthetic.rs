//! Procedural ground-truth MPIs and posed-view scenes rendered from them.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{rotation_from_axis_angle, Camera};
use crate::error::{Error, Result};
use crate::fit::Frame;
use crate::grid::ImageGrid;
use crate::planes::{PlaneDepths, SparsePoint, SparsePointSet};
use crate::render::{disparity_map, render_view, Mpi};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticOptions {
    pub width: usize,
    pub height: usize,
    pub planes: usize,
    pub d_near: f64,
    pub d_far: f64,
    /// Focal length in pixels; the principal point is the image centre.
    pub focal: f64,
    /// Posed views in the fitting set, including the source view.
    pub views: usize,
    /// Camera offset radius in world units.
    pub baseline: f64,
    /// Magnitude of the random per-view rotation, in radians.
    pub jitter_rotation: f64,
    pub num_points: usize,
    /// Factor applied to every reported translation and point depth.
    pub world_scale: f64,
    /// Standard deviation of multiplicative log-normal noise on point depths.
    pub depth_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            planes: 16,
            d_near: 1.0,
            d_far: 100.0,
            focal: 128.0,
            views: 8,
            baseline: 0.04,
            jitter_rotation: 0.002,
            num_points: 200,
            world_scale: 1.0,
            depth_noise: 0.0,
            seed: 7,
        }
    }
}

/// Scene rendered from a known MPI. `frames[source_index]` is the MPI's
/// reference view and the only frame carrying points.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub ground_truth: Mpi,
    pub frames: Vec<Frame>,
    pub source_index: usize,
    pub held_out: Frame,
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    color: [f64; 3],
}

fn random_texture(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Result<ImageGrid> {
    let base: [f64; 3] = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
    let waves: Vec<Wave> = (0..4)
        .map(|_| {
            let period = rng.gen_range(10.0..40.0);
            let angle = rng.gen_range(0.0..PI);
            Wave {
                fx: 2.0 * PI * angle.cos() / period,
                fy: 2.0 * PI * angle.sin() / period,
                phase: rng.gen_range(0.0..2.0 * PI),
                color: [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)],
            }
        })
        .collect();
    ImageGrid::from_fn(w, h, 3, |x, y, c| {
        let v = waves
            .iter()
            .map(|wv| wv.color[c] * (wv.fx * x as f64 + wv.fy * y as f64 + wv.phase).sin())
            .sum::<f64>();
        (base[c] + v).clamp(0.0, 1.0)
    })
}

/// Coverage of a disk or axis-aligned box with a one-pixel linear edge ramp.
fn random_shape(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Result<ImageGrid> {
    let (cx, cy) = (rng.gen_range(0.2..0.8) * w as f64, rng.gen_range(0.2..0.8) * h as f64);
    let size = rng.gen_range(0.12..0.25) * w.min(h) as f64;
    let disk = rng.gen_bool(0.5);
    let aspect = rng.gen_range(0.6..1.6);
    ImageGrid::from_fn(w, h, 1, |x, y, _| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let outside = if disk {
            (dx * dx + dy * dy).sqrt() - size
        } else {
            (dx.abs() - size * aspect).max(dy.abs() - size / aspect)
        };
        (0.5 - outside).clamp(0.0, 1.0)
    })
}

/// Opaque textured back plane plus textured opaque shapes on a few nearer
/// planes; every other plane is empty.
pub fn textured_mpi(reference: Camera, planes: PlaneDepths, width: usize, height: usize, seed: u64) -> Result<Mpi> {
    let d = planes.len();
    if d < 2 {
        return Err(Error::InvalidConfig(format!("synthetic mpi needs at least 2 planes, got {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let occupied: Vec<usize> = [d / 3, (2 * d) / 3, d - 3]
        .into_iter()
        .filter(|&i| i > 0 && i < d)
        .collect();
    let mut colors = Vec::with_capacity(d);
    let mut alphas = Vec::with_capacity(d);
    for i in 0..d {
        if i == 0 {
            colors.push(random_texture(width, height, &mut rng)?);
            alphas.push(ImageGrid::filled(width, height, 1, 1.0)?);
        } else if occupied.contains(&i) {
            colors.push(random_texture(width, height, &mut rng)?);
            alphas.push(random_shape(width, height, &mut rng)?);
        } else {
            colors.push(ImageGrid::filled(width, height, 3, 0.5)?);
            alphas.push(ImageGrid::new(width, height, 1)?);
        }
    }
    Mpi::new(reference, planes, colors, alphas)
}

fn offset_camera(base: &Camera, position: Vector3<f64>, axis_angle: Vector3<f64>) -> Result<Camera> {
    // camera centre at `position`: t = -R c
    let r = rotation_from_axis_angle(axis_angle);
    let t = -(r * position);
    Camera::new(base.fx, base.fy, base.cx, base.cy, r, t)
}

/// Renders `options.views` posed images of a random textured MPI (source
/// view at the origin, the others on a ring of radius `baseline`) plus one
/// held-out view inside the ring. Reported poses and points are in a world
/// scaled by `world_scale`.
pub fn synthetic_scene(options: &SyntheticOptions) -> Result<SyntheticScene> {
    if options.views < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 views, got {}", options.views)));
    }
    if !(options.world_scale > 0.0) || !(options.depth_noise >= 0.0) || !(options.baseline > 0.0) {
        return Err(Error::InvalidConfig(
            "world_scale and baseline must be positive, depth_noise non-negative".into(),
        ));
    }
    let (w, h) = (options.width, options.height);
    let reference = Camera::identity_pose(options.focal, options.focal, w as f64 / 2.0, h as f64 / 2.0)?;
    let planes = PlaneDepths::new(options.d_near, options.d_far, options.planes)?;
    let mpi = textured_mpi(reference.clone(), planes, w, h, options.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x5eed);
    let b = options.baseline;
    let ring = options.views - 1;
    let jitter = |rng: &mut ChaCha8Rng| {
        let v: Vector3<f64> = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        v * (options.jitter_rotation / v.norm().max(1e-12))
    };
    let mut cameras = vec![reference.clone()];
    for j in 0..ring {
        let theta = 2.0 * PI * j as f64 / ring as f64;
        let position = Vector3::new(b * theta.cos(), b * theta.sin(), 0.25 * b * (2.0 * theta).sin());
        cameras.push(offset_camera(&reference, position, jitter(&mut rng))?);
    }
    let held_out_camera = offset_camera(&reference, Vector3::new(0.45 * b, -0.3 * b, 0.1 * b), jitter(&mut rng))?;

    let disparity = disparity_map(&mpi);
    let log_noise = Normal::new(0.0, options.depth_noise)
        .map_err(|e| Error::InvalidConfig(format!("depth noise: {e}")))?;
    let mut points = Vec::with_capacity(options.num_points);
    for _ in 0..options.num_points {
        let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
        let noise = log_noise.sample(&mut rng).exp();
        let depth = options.world_scale * noise / disparity.get(x, y, 0);
        points.push(SparsePoint {
            x: x as f64,
            y: y as f64,
            depth,
        });
    }
    let points = SparsePointSet::new(points)?;

    let report = |camera: &Camera, points: SparsePointSet| -> Result<Frame> {
        Ok(Frame {
            camera: camera.with_scaled_translation(options.world_scale),
            image: render_view(&mpi, camera, 1.0)?,
            points,
        })
    };
    let mut frames = Vec::with_capacity(cameras.len());
    for (i, camera) in cameras.iter().enumerate() {
        let p = if i == 0 { points.clone() } else { SparsePointSet::empty() };
        frames.push(report(camera, p)?);
    }
    let held_out = report(&held_out_camera, SparsePointSet::empty())?;
    Ok(SyntheticScene {
        ground_truth: mpi,
        frames,
        source_index: 0,
        held_out,
    })
}
