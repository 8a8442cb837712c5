use std::fs;
use std::path::{Path, PathBuf};

use image::ExtendedColorType;
use serde::{Deserialize, Serialize};

use super::io_error;
use super::png::{quantize16, quantize8, read_rgba16, u16_bytes, write_png};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::planes::PlaneDepths;
use crate::render::Mpi;

pub const ARCHIVE_VERSION: u32 = 1;
pub const METADATA_FILE: &str = "mpi.json";
const VIEWER_FILE: &str = "viewer.json";
const PREVIEW_DIR: &str = "preview";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub intrinsics: [f64; 4],
    pub pose: [f64; 12],
}

/// Contents of `mpi.json`. Layer 0 is the farthest plane; colors use straight
/// (unpremultiplied) alpha.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMetadata {
    pub format_version: u32,
    pub width: usize,
    pub height: usize,
    pub num_planes: usize,
    pub d_near: f64,
    pub d_far: f64,
    pub depths: Vec<f64>,
    pub reference: CameraRecord,
    pub bit_depth: u32,
    pub layer_files: Vec<String>,
}

fn layer_name(i: usize) -> String {
    format!("layer_{i:03}.png")
}

impl ArchiveMetadata {
    fn describe(mpi: &Mpi, bit_depth: u32, prefix: &str) -> Self {
        let reference = mpi.reference();
        Self {
            format_version: ARCHIVE_VERSION,
            width: mpi.width(),
            height: mpi.height(),
            num_planes: mpi.depth_count(),
            d_near: mpi.planes().near(),
            d_far: mpi.planes().far(),
            depths: mpi.planes().depths().to_vec(),
            reference: CameraRecord {
                intrinsics: reference.intrinsics(),
                pose: reference.pose_flat(),
            },
            bit_depth,
            layer_files: (0..mpi.depth_count()).map(|i| format!("{prefix}{}", layer_name(i))).collect(),
        }
    }
}

fn interleave<T>(color: &ImageGrid, alpha: &ImageGrid, q: impl Fn(f64) -> T) -> Vec<T> {
    color
        .as_slice()
        .chunks_exact(3)
        .zip(alpha.as_slice())
        .flat_map(|(rgb, &a)| [q(rgb[0]), q(rgb[1]), q(rgb[2]), q(a)])
        .collect()
}

fn write_metadata(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("metadata serializes");
    fs::write(path, text + "\n").map_err(io_error(path))
}

/// Writes `mpi.json` plus one 16-bit RGBA PNG per layer into `dir`.
pub fn save_mpi(mpi: &Mpi, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let meta = ArchiveMetadata::describe(mpi, 16, "");
    for (i, (color, alpha)) in mpi.colors().iter().zip(mpi.alphas()).enumerate() {
        let samples = interleave(color, alpha, quantize16);
        write_png(
            &dir.join(&meta.layer_files[i]),
            mpi.width(),
            mpi.height(),
            &u16_bytes(&samples),
            ExtendedColorType::Rgba16,
        )?;
    }
    write_metadata(&dir.join(METADATA_FILE), &meta)
}

/// Loads and validates an archive written by [`save_mpi`]. A back layer that
/// is not fully opaque is repaired to opaque with a warning.
pub fn load_mpi(dir: &Path) -> Result<Mpi> {
    let meta_path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&meta_path).map_err(io_error(&meta_path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Parse {
            path: meta_path.clone(),
            message: "missing format_version".into(),
        })?;
    if version != ARCHIVE_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: version.min(u32::MAX as u64) as u32,
            supported: ARCHIVE_VERSION,
        });
    }
    let meta: ArchiveMetadata = serde_json::from_value(value).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    if meta.layer_files.len() != meta.num_planes || meta.depths.len() != meta.num_planes {
        return Err(Error::InvalidMpi(format!(
            "metadata lists {} layer files and {} depths for {} planes",
            meta.layer_files.len(),
            meta.depths.len(),
            meta.num_planes
        )));
    }
    let planes = PlaneDepths::from_depths(meta.d_near, meta.d_far, &meta.depths)?;
    let reference = Camera::from_flat(&meta.reference.intrinsics, &meta.reference.pose)?;
    let (w, h) = (meta.width, meta.height);
    let mut colors = Vec::with_capacity(meta.num_planes);
    let mut alphas = Vec::with_capacity(meta.num_planes);
    for (index, file) in meta.layer_files.iter().enumerate() {
        let path = dir.join(file);
        if !path.is_file() {
            return Err(Error::CorruptLayer {
                index,
                reason: format!("missing file {}", path.display()),
            });
        }
        let (lw, lh, samples) = read_rgba16(&path).map_err(|e| Error::CorruptLayer {
            index,
            reason: e.to_string(),
        })?;
        if (lw, lh) != (w, h) {
            return Err(Error::CorruptLayer {
                index,
                reason: format!("layer is {lw}x{lh}, metadata says {w}x{h}"),
            });
        }
        let mut color = Vec::with_capacity(w * h * 3);
        let mut alpha = Vec::with_capacity(w * h);
        for px in samples.chunks_exact(4) {
            color.extend(px[..3].iter().map(|&v| v as f64 / 65535.0));
            alpha.push(px[3] as f64 / 65535.0);
        }
        colors.push(ImageGrid::from_vec(w, h, 3, color)?);
        alphas.push(ImageGrid::from_vec(w, h, 1, alpha)?);
    }
    if let Some(back) = alphas.first_mut() {
        let transparent = back.as_slice().iter().filter(|&&a| a != 1.0).count();
        if transparent > 0 {
            log::warn!("back layer has {transparent} non-opaque pixel(s); setting alpha to 1");
            back.as_mut_slice().fill(1.0);
        }
    }
    Mpi::new(reference, planes, colors, alphas)
}

#[derive(Serialize)]
struct ViewerManifest<'a> {
    format_version: u32,
    archive: &'a str,
    #[serde(flatten)]
    preview: &'a ArchiveMetadata,
}

/// Writes the archive into `dir` together with `preview/` 8-bit RGBA layers
/// and a `viewer.json` manifest describing them.
pub fn export_bundle(mpi: &Mpi, dir: &Path) -> Result<PathBuf> {
    save_mpi(mpi, dir)?;
    let preview_dir = dir.join(PREVIEW_DIR);
    fs::create_dir_all(&preview_dir).map_err(io_error(&preview_dir))?;
    let meta = ArchiveMetadata::describe(mpi, 8, &format!("{PREVIEW_DIR}/"));
    for (i, (color, alpha)) in mpi.colors().iter().zip(mpi.alphas()).enumerate() {
        let bytes = interleave(color, alpha, quantize8);
        write_png(&dir.join(&meta.layer_files[i]), mpi.width(), mpi.height(), &bytes, ExtendedColorType::Rgba8)?;
    }
    let manifest = ViewerManifest {
        format_version: ARCHIVE_VERSION,
        archive: METADATA_FILE,
        preview: &meta,
    };
    let path = dir.join(VIEWER_FILE);
    write_metadata(&path, &manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mpi(w: usize, h: usize, d: usize, seed: u64) -> Mpi {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference = Camera::identity_pose(w as f64, w as f64, w as f64 / 2.0, h as f64 / 2.0).unwrap();
        let planes = PlaneDepths::new(1.0, 100.0, d).unwrap();
        let colors = (0..d)
            .map(|_| ImageGrid::from_fn(w, h, 3, |_, _, _| rng.gen()).unwrap())
            .collect();
        let alphas = (0..d)
            .map(|i| ImageGrid::from_fn(w, h, 1, |_, _, _| if i == 0 { 1.0 } else { rng.gen() }).unwrap())
            .collect();
        Mpi::new(reference, planes, colors, alphas).unwrap()
    }

    fn max_diff(a: &Mpi, b: &Mpi) -> f64 {
        let c = a.colors().iter().zip(b.colors()).map(|(x, y)| x.max_abs_diff(y));
        let al = a.alphas().iter().zip(b.alphas()).map(|(x, y)| x.max_abs_diff(y));
        c.chain(al).fold(0.0, f64::max)
    }

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mpi = random_mpi(16, 16, 4, 1);
        save_mpi(&mpi, dir.path()).unwrap();
        let back = load_mpi(dir.path()).unwrap();
        assert!(max_diff(&mpi, &back) <= 1.0 / 65535.0);
        assert_eq!(back.planes(), mpi.planes());
        assert_eq!(back.reference(), mpi.reference());
    }

    #[test]
    fn missing_layer_is_named() {
        let dir = tempfile::tempdir().unwrap();
        save_mpi(&random_mpi(8, 8, 4, 2), dir.path()).unwrap();
        fs::remove_file(dir.path().join("layer_002.png")).unwrap();
        match load_mpi(dir.path()) {
            Err(Error::CorruptLayer { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected corrupt layer, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_mpi(&random_mpi(8, 8, 2, 3), dir.path()).unwrap();
        let path = dir.path().join(METADATA_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_mpi(dir.path()), Err(Error::VersionMismatch { found: 7, .. })));
    }

    #[test]
    fn wrong_layer_size_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        save_mpi(&random_mpi(8, 8, 2, 4), dir.path()).unwrap();
        let other = tempfile::tempdir().unwrap();
        save_mpi(&random_mpi(9, 8, 2, 4), other.path()).unwrap();
        fs::copy(other.path().join("layer_001.png"), dir.path().join("layer_001.png")).unwrap();
        assert!(matches!(load_mpi(dir.path()), Err(Error::CorruptLayer { index: 1, .. })));
    }

    #[test]
    fn translucent_back_layer_is_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let mpi = random_mpi(4, 4, 2, 5);
        save_mpi(&mpi, dir.path()).unwrap();
        let mut samples = interleave(&mpi.colors()[0], &mpi.alphas()[0], quantize16);
        samples[3] = 60000;
        write_png(&dir.path().join("layer_000.png"), 4, 4, &u16_bytes(&samples), ExtendedColorType::Rgba16).unwrap();
        let back = load_mpi(dir.path()).unwrap();
        assert!(back.alphas()[0].as_slice().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn save_is_byte_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mpi = random_mpi(8, 8, 3, 6);
        save_mpi(&mpi, a.path()).unwrap();
        save_mpi(&mpi, b.path()).unwrap();
        for name in ["mpi.json", "layer_000.png", "layer_001.png", "layer_002.png"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn export_writes_preview_layers() {
        let dir = tempfile::tempdir().unwrap();
        let mpi = random_mpi(8, 6, 3, 7);
        let manifest = export_bundle(&mpi, dir.path()).unwrap();
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(manifest).unwrap()).unwrap();
        assert_eq!(json["bit_depth"], 8);
        assert_eq!(json["num_planes"], 3);
        assert_eq!(json["layer_files"][2], "preview/layer_002.png");
        let img = image::open(dir.path().join("preview/layer_001.png")).unwrap();
        assert_eq!(img.color(), image::ColorType::Rgba8);
        let px = img.to_rgba8();
        let expected = (mpi.alphas()[1].get(3, 2, 0) * 255.0).round() as u8;
        assert_eq!(px.get_pixel(3, 2)[3], expected);
        assert!(load_mpi(dir.path()).is_ok());
    }
}
