use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ColorType, DynamicImage, ExtendedColorType, ImageEncoder};

use super::io_error;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;

fn image_error(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Reads an 8- or 16-bit grayscale or RGB PNG as a 3-channel grid in [0, 1].
/// Grayscale is replicated into all three channels.
pub fn read_image(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img.color() {
        ColorType::L8 | ColorType::Rgb8 => {
            let buf = img.to_rgb8();
            let data = buf.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            ImageGrid::from_vec(w, h, 3, data)
        }
        ColorType::L16 | ColorType::Rgb16 => {
            let buf = img.to_rgb16();
            let data = buf.as_raw().iter().map(|&v| v as f64 / 65535.0).collect();
            ImageGrid::from_vec(w, h, 3, data)
        }
        other => Err(image_error(
            path,
            format!("unsupported pixel format {other:?}; expected grayscale or RGB"),
        )),
    }
}

pub(crate) fn read_rgba16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img: DynamicImage = image::open(path).map_err(|e| image_error(path, e))?;
    if img.color() != ColorType::Rgba16 {
        return Err(image_error(path, format!("expected 16-bit RGBA, found {:?}", img.color())));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.into_rgba16().into_raw()))
}

pub(crate) fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub(crate) fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn write_png(path: &Path, width: usize, height: usize, bytes: &[u8], color: ExtendedColorType) -> Result<()> {
    let file = File::create(path).map_err(io_error(path))?;
    PngEncoder::new(BufWriter::new(file))
        .write_image(bytes, width as u32, height as u32, color)
        .map_err(|e| image_error(path, e))
}

/// The encoder takes 16-bit samples as native-endian bytes.
pub(crate) fn u16_bytes(samples: &[u16]) -> Vec<u8> {
    samples.iter().flat_map(|v| v.to_ne_bytes()).collect()
}

fn check_channels(grid: &ImageGrid, channels: usize, path: &Path) -> Result<()> {
    if grid.channels() != channels {
        return Err(image_error(
            path,
            format!("expected {channels} channel(s), got {}", grid.channels()),
        ));
    }
    Ok(())
}

pub fn write_rgb16(path: &Path, grid: &ImageGrid) -> Result<()> {
    check_channels(grid, 3, path)?;
    let samples: Vec<u16> = grid.as_slice().iter().map(|&v| quantize16(v)).collect();
    write_png(path, grid.width(), grid.height(), &u16_bytes(&samples), ExtendedColorType::Rgb16)
}

pub fn write_rgb8(path: &Path, grid: &ImageGrid) -> Result<()> {
    check_channels(grid, 3, path)?;
    let bytes: Vec<u8> = grid.as_slice().iter().map(|&v| quantize8(v)).collect();
    write_png(path, grid.width(), grid.height(), &bytes, ExtendedColorType::Rgb8)
}

pub fn write_gray16(path: &Path, grid: &ImageGrid) -> Result<()> {
    check_channels(grid, 1, path)?;
    let samples: Vec<u16> = grid.as_slice().iter().map(|&v| quantize16(v)).collect();
    write_png(path, grid.width(), grid.height(), &u16_bytes(&samples), ExtendedColorType::L16)
}
