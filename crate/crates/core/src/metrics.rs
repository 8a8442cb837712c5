//! PSNR, SSIM, border cropping and disocclusion-masked evaluation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::render::{blend_weights, disocclusion_mask, render_view, Mpi};

/// Reported PSNR when the images are identical.
pub const PSNR_CAP: f64 = 99.0;
pub const MAX_CROP_FRACTION: f64 = 0.45;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Removes `floor(fraction * W)` columns from each side and
/// `floor(fraction * H)` rows from top and bottom.
pub fn crop_border(image: &ImageGrid, fraction: f64) -> Result<ImageGrid> {
    if !(0.0..=MAX_CROP_FRACTION).contains(&fraction) {
        return Err(Error::InvalidRange(format!(
            "crop fraction must be in [0, {MAX_CROP_FRACTION}], got {fraction}"
        )));
    }
    let (w, h) = (image.width(), image.height());
    let cx = (fraction * w as f64 + 1e-9).floor() as usize;
    let cy = (fraction * h as f64 + 1e-9).floor() as usize;
    if 2 * cx >= w || 2 * cy >= h {
        return Err(Error::EmptyResult(format!("cropping {w}x{h} by {fraction}")));
    }
    ImageGrid::from_fn(w - 2 * cx, h - 2 * cy, image.channels(), |x, y, c| {
        image.get(x + cx, y + cy, c)
    })
}

fn selected(mask: Option<&ImageGrid>, threshold: f64, p: usize) -> bool {
    mask.is_none_or(|m| m.as_slice()[p] > threshold)
}

fn check_mask(a: &ImageGrid, mask: Option<&ImageGrid>) -> Result<()> {
    if let Some(m) = mask {
        a.check_same_size(m, "metric mask")?;
        if m.channels() != 1 {
            return Err(Error::mismatch("mask channels", 1, m.channels()));
        }
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for unit peak over the pixels where `mask > threshold`
/// (all pixels without a mask), capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageGrid, b: &ImageGrid, mask: Option<&ImageGrid>, threshold: f64) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    check_mask(a, mask)?;
    let ch = a.channels();
    let (mut sum, mut count) = (0.0, 0usize);
    for p in 0..a.pixel_count() {
        if !selected(mask, threshold, p) {
            continue;
        }
        for c in 0..ch {
            let d = a.as_slice()[p * ch + c] - b.as_slice()[p * ch + c];
            sum += d * d;
        }
        count += ch;
    }
    if count == 0 {
        return Err(Error::EmptyMask { threshold });
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - SSIM_RADIUS as f64;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter over the valid region only.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (vw, vh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; vw * h];
    for y in 0..h {
        for x in 0..vw {
            rows[y * vw + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; vw * vh];
    for y in 0..vh {
        for x in 0..vw {
            out[y * vw + x] = (0..n).map(|i| k[i] * rows[(y + i) * vw + x]).sum();
        }
    }
    (out, vw, vh)
}

/// Per-channel SSIM maps over the valid window positions; entry `(x, y)` is
/// centred on image pixel `(x + 5, y + 5)`.
fn ssim_maps(a: &ImageGrid, b: &ImageGrid) -> (Vec<Vec<f64>>, usize, usize) {
    let (w, h) = (a.width(), a.height());
    let k = gaussian_window();
    let mut maps = Vec::with_capacity(a.channels());
    let (mut vw, mut vh) = (0, 0);
    for c in 0..a.channels() {
        let (x, y) = (a.channel(c), b.channel(c));
        let (xs, ys) = (x.as_slice(), y.as_slice());
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(ys).map(|(p, q)| p * q).collect();
        let (mx, fw, fh) = filter_valid(xs, w, h, &k);
        let (my, _, _) = filter_valid(ys, w, h, &k);
        let (sxx, _, _) = filter_valid(&xx, w, h, &k);
        let (syy, _, _) = filter_valid(&yy, w, h, &k);
        let (sxy, _, _) = filter_valid(&xy, w, h, &k);
        let map = (0..fw * fh)
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cov = sxy[i] - ux * uy;
                ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
            })
            .collect();
        maps.push(map);
        (vw, vh) = (fw, fh);
    }
    (maps, vw, vh)
}

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5, K1 = 0.01,
/// K2 = 0.03, unit peak), averaged over channels. With a mask, the SSIM map
/// is averaged over window centres where `mask > threshold`.
pub fn ssim(a: &ImageGrid, b: &ImageGrid, mask: Option<&ImageGrid>, threshold: f64) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    check_mask(a, mask)?;
    let min = 2 * SSIM_RADIUS + 1;
    if a.width() < min || a.height() < min {
        return Err(Error::TooSmall {
            context: "ssim",
            width: a.width(),
            height: a.height(),
            min,
        });
    }
    let (maps, vw, vh) = ssim_maps(a, b);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..vh {
        for x in 0..vw {
            let p = (y + SSIM_RADIUS) * a.width() + x + SSIM_RADIUS;
            if !selected(mask, threshold, p) {
                continue;
            }
            for map in &maps {
                sum += map[y * vw + x];
            }
            count += maps.len();
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask { threshold });
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub crop_fraction: f64,
    pub disocc_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            crop_fraction: 0.05,
            disocc_threshold: 0.6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_all: f64,
    pub ssim_all: f64,
    /// `None` when no cropped pixel exceeds the disocclusion threshold.
    pub psnr_masked: Option<f64>,
    pub ssim_masked: Option<f64>,
    pub mask_pixel_count: usize,
    pub crop_fraction: f64,
}

impl fmt::Display for MetricReport {
    /// Flat `key=value` record; absent values print as `NA`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "psnr_all={:.6} ssim_all={:.6} psnr_masked={} ssim_masked={} mask_pixel_count={} crop_fraction={}",
            self.psnr_all,
            self.ssim_all,
            opt(self.psnr_masked),
            opt(self.ssim_masked),
            self.mask_pixel_count,
            self.crop_fraction
        )
    }
}

/// Renders `mpi` at `target_cam`, then scores it against `target_image` on
/// the cropped frame and on its disoccluded pixels.
pub fn evaluate_pair(
    mpi: &Mpi,
    target_cam: &Camera,
    target_image: &ImageGrid,
    sigma: f64,
    config: &EvalConfig,
) -> Result<MetricReport> {
    let rendered = render_view(mpi, target_cam, sigma)?;
    rendered.check_same_shape(target_image, "evaluation target")?;
    let mask = disocclusion_mask(mpi, &blend_weights(mpi.alphas()), target_cam, sigma)?;
    let rendered = crop_border(&rendered, config.crop_fraction)?;
    let target = crop_border(target_image, config.crop_fraction)?;
    let mask = crop_border(&mask, config.crop_fraction)?;
    let t = config.disocc_threshold;
    let mask_pixel_count = mask.as_slice().iter().filter(|&&m| m > t).count();
    let (psnr_masked, ssim_masked) = if mask_pixel_count > 0 {
        (
            Some(psnr(&rendered, &target, Some(&mask), t)?),
            absent_if_empty(ssim(&rendered, &target, Some(&mask), t))?,
        )
    } else {
        (None, None)
    };
    Ok(MetricReport {
        psnr_all: psnr(&rendered, &target, None, t)?,
        ssim_all: ssim(&rendered, &target, None, t)?,
        psnr_masked,
        ssim_masked,
        mask_pixel_count,
        crop_fraction: config.crop_fraction,
    })
}

fn absent_if_empty(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyMask { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}
