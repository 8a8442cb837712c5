use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io_error;
use super::png::{read_image, write_rgb16};
use crate::camera::{orthonormality_error, reorthonormalize, split_pose, Camera, ORTHONORMAL_TOLERANCE};
use crate::error::{Error, Result};
use crate::fit::Frame;
use crate::planes::{SparsePoint, SparsePointSet};

pub const SCENE_VERSION: u32 = 1;

/// Rotations deviating from orthonormal by more than this are rejected;
/// smaller deviations are projected back onto SO(3).
pub const POSE_REPAIR_TOLERANCE: f64 = 1e-6;

/// JSON scene description. Image paths are relative to the scene file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub version: u32,
    pub frames: Vec<SceneFrame>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFrame {
    pub image: PathBuf,
    /// `[fx, fy, cx, cy]` in pixels.
    pub intrinsics: Vec<f64>,
    /// Row-major 3x4 world-to-camera matrix.
    pub pose: Vec<f64>,
    /// `[x, y, depth]` triples in source pixels.
    #[serde(default)]
    pub points: Vec<[f64; 3]>,
}

fn parse_error(path: &Path, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message,
    }
}

fn frame_camera(path: &Path, index: usize, frame: &SceneFrame) -> Result<Camera> {
    let intrinsics: [f64; 4] = frame.intrinsics.as_slice().try_into().map_err(|_| {
        parse_error(
            path,
            format!("frame {index}: intrinsics must have 4 numbers, got {}", frame.intrinsics.len()),
        )
    })?;
    let pose: [f64; 12] = frame.pose.as_slice().try_into().map_err(|_| {
        parse_error(
            path,
            format!("frame {index}: pose must have 12 numbers (3x4 row-major), got {}", frame.pose.len()),
        )
    })?;
    let (mut rotation, translation) = split_pose(&pose);
    let dev = orthonormality_error(&rotation);
    if dev > POSE_REPAIR_TOLERANCE || !dev.is_finite() {
        return Err(Error::InvalidCamera(format!(
            "frame {index}: pose rotation is not orthonormal (deviation {dev:e})"
        )));
    }
    if dev >= ORTHONORMAL_TOLERANCE {
        log::warn!("frame {index}: re-orthonormalizing pose rotation (deviation {dev:e})");
        rotation = reorthonormalize(&rotation);
    }
    let [fx, fy, cx, cy] = intrinsics;
    Camera::new(fx, fy, cx, cy, rotation, translation)
        .map_err(|e| Error::InvalidCamera(format!("frame {index}: {e}")))
}

/// Loads every frame of a scene file, with images normalized to [0, 1].
pub fn load_scene(path: &Path) -> Result<Vec<Frame>> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    let scene: SceneFile = serde_json::from_str(&text).map_err(|e| parse_error(path, e.to_string()))?;
    if scene.version != SCENE_VERSION {
        return Err(Error::VersionMismatch {
            found: scene.version,
            supported: SCENE_VERSION,
        });
    }
    if scene.frames.is_empty() {
        return Err(parse_error(path, "scene has no frames".into()));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut frames: Vec<Frame> = Vec::with_capacity(scene.frames.len());
    for (index, frame) in scene.frames.iter().enumerate() {
        let camera = frame_camera(path, index, frame)?;
        let image = read_image(&base.join(&frame.image))?;
        if let Some(first) = frames.first() {
            if !image.same_size(&first.image) {
                return Err(Error::mismatch(
                    "scene image size",
                    format!("{}x{}", first.image.width(), first.image.height()),
                    format!("{}x{} (frame {index})", image.width(), image.height()),
                ));
            }
        }
        let points = SparsePointSet::new(
            frame
                .points
                .iter()
                .map(|&[x, y, depth]| SparsePoint { x, y, depth })
                .collect(),
        )
        .and_then(|p| p.check_bounds(image.width(), image.height()).map(|_| p))
        .map_err(|e| parse_error(path, format!("frame {index}: {e}")))?;
        frames.push(Frame { camera, image, points });
    }
    Ok(frames)
}

/// Writes `frames` as `frame_NNN.png` (16-bit) next to a `scene.json`.
/// Returns the scene file path.
pub fn save_scene(dir: &Path, frames: &[Frame]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let mut records = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        let name = PathBuf::from(format!("frame_{i:03}.png"));
        write_rgb16(&dir.join(&name), &frame.image)?;
        records.push(SceneFrame {
            image: name,
            intrinsics: frame.camera.intrinsics().to_vec(),
            pose: frame.camera.pose_flat().to_vec(),
            points: frame.points.points().iter().map(|p| [p.x, p.y, p.depth]).collect(),
        });
    }
    let scene = SceneFile {
        version: SCENE_VERSION,
        frames: records,
    };
    let path = dir.join("scene.json");
    let text = serde_json::to_string_pretty(&scene).expect("scene serializes");
    fs::write(&path, text).map_err(io_error(&path))?;
    Ok(path)
}
