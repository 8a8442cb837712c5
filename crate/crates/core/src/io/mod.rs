//! File formats: scene descriptions, MPI archives and viewer bundles.
//!
//! Images are PNG. Intrinsics are in pixels, with pixel `(x, y)` centred at
//! integer coordinates. From normalized intrinsics (image spanning `[0, 1]`,
//! pixel centres at `(i + 0.5) / W`): `fx = fx_n * W`, `cx = cx_n * W - 0.5`,
//! and likewise `fy, cy` with the height.
//! Poses are 3x4 world-to-camera matrices flattened row-major.

mod archive;
mod png;
mod scene;

pub use archive::{export_bundle, load_mpi, save_mpi, ArchiveMetadata, ARCHIVE_VERSION, METADATA_FILE};
pub use png::{read_image, write_gray16, write_rgb16, write_rgb8};
pub use scene::{load_scene, save_scene, SceneFile, SceneFrame, SCENE_VERSION};

use std::path::Path;

use crate::error::Error;

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
