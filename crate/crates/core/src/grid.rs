//! Dense sample grids and bilinear sampling.
//!
//! Sample `(i, j)` lives at continuous coordinate `(x, y) = (i, j)`; the same
//! pixel-centre convention is used by every projection in the crate.

use crate::error::{Error, Result};

/// A `width x height x channels` grid of `f64` samples, row-major and
/// channel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        check_shape(width, height, channels)?;
        Ok(Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        })
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(width, height, channels)?;
        if data.len() != width * height * channels {
            return Err(Error::mismatch(
                "grid samples",
                width * height * channels,
                data.len(),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a grid by evaluating `f(x, y, channel)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        check_shape(width, height, channels)?;
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Zero grid with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: vec![0.0; self.data.len()],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of pixels, `W * H`.
    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        let i = self.index(x, y, c);
        self.data[i] = value;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn same_size(&self, other: &ImageGrid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.channels)
    }

    pub(crate) fn check_same_shape(&self, other: &ImageGrid, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::mismatch(
                context,
                self.shape_string(),
                other.shape_string(),
            ))
        }
    }

    pub(crate) fn check_same_size(&self, other: &ImageGrid, context: &'static str) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(Error::mismatch(
                context,
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ))
        }
    }

    /// Extracts one channel as a single-channel grid.
    pub fn channel(&self, c: usize) -> ImageGrid {
        assert!(c < self.channels, "channel {c} out of range");
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px[c])
            .collect();
        ImageGrid {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ImageGrid) -> f64 {
        assert!(self.same_shape(other), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear sample with clamp-to-edge borders; one value per channel.
    pub fn sample(&self, x: f64, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        bilinear_sample_into(self, x, y, BorderMode::Clamp, &mut out);
        out
    }
}

fn check_shape(width: usize, height: usize, channels: usize) -> Result<()> {
    let reason = if width == 0 {
        "width must be at least 1"
    } else if height == 0 {
        "height must be at least 1"
    } else if channels == 0 {
        "channels must be at least 1"
    } else {
        return Ok(());
    };
    Err(Error::InvalidShape {
        width,
        height,
        channels,
        reason,
    })
}

/// How a sample position outside the grid rectangle is resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BorderMode {
    /// Neighbours outside the grid contribute zero (zero padding).
    Zero,
    /// Positions are clamped to the grid rectangle.
    Clamp,
}

/// The (up to) four grid samples feeding one bilinear lookup, with their
/// weights and the derivatives of those weights with respect to the lookup
/// position.
#[derive(Clone, Copy, Debug, Default)]
pub struct BilinearTaps {
    pub len: usize,
    /// Pixel indices (`y * width + x`).
    pub pixels: [usize; 4],
    pub weights: [f64; 4],
    pub d_dx: [f64; 4],
    pub d_dy: [f64; 4],
    /// Discrete state of the lookup (cell and clamping); changes whenever the
    /// lookup crosses a point where it is not differentiable.
    pub cell: (i64, i64, u8),
}

impl BilinearTaps {
    pub fn empty() -> Self {
        Self {
            cell: (i64::MIN, i64::MIN, 0),
            ..Default::default()
        }
    }

    #[inline]
    fn push(&mut self, pixel: usize, w: f64, dx: f64, dy: f64) {
        self.pixels[self.len] = pixel;
        self.weights[self.len] = w;
        self.d_dx[self.len] = dx;
        self.d_dy[self.len] = dy;
        self.len += 1;
    }

    #[inline]
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(move |k| (self.pixels[k], self.weights[k]))
    }
}

/// `v.floor()` for finite `v` within `i64` range, without a libm call.
#[inline]
fn floor_fast(v: f64) -> f64 {
    let t = v as i64 as f64;
    if t > v {
        t - 1.0
    } else {
        t
    }
}

/// Resolves one axis to (low index, high index, fraction, clamped?) under clamping.
#[inline]
fn clamp_axis(v: f64, n: usize) -> (usize, usize, f64, bool) {
    let max = (n - 1) as f64;
    if n == 1 {
        return (0, 0, 0.0, true);
    }
    let clamped = !(0.0..=max).contains(&v);
    let v = v.clamp(0.0, max);
    let lo = (floor_fast(v) as usize).min(n - 2);
    (lo, lo + 1, v - lo as f64, clamped)
}

/// Computes the bilinear taps for position `(x, y)` in a `width x height` grid.
#[inline(always)]
pub fn bilinear_taps(width: usize, height: usize, x: f64, y: f64, mode: BorderMode) -> BilinearTaps {
    if x >= 0.0 && y >= 0.0 && x < (width - 1) as f64 && y < (height - 1) as f64 {
        // interior: both border modes agree
        let (xf, yf) = (floor_fast(x), floor_fast(y));
        let (fx, fy) = (x - xf, y - yf);
        let (x0, y0) = (xf as usize, yf as usize);
        let p = y0 * width + x0;
        return BilinearTaps {
            len: 4,
            pixels: [p, p + 1, p + width, p + width + 1],
            weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            d_dx: [-(1.0 - fy), 1.0 - fy, -fy, fy],
            d_dy: [-(1.0 - fx), -fx, 1.0 - fx, fx],
            cell: (x0 as i64, y0 as i64, 0),
        };
    }
    border_taps(width, height, x, y, mode)
}

#[inline(never)]
fn border_taps(width: usize, height: usize, x: f64, y: f64, mode: BorderMode) -> BilinearTaps {
    let mut taps = BilinearTaps::empty();
    if !(x.is_finite() && y.is_finite()) {
        return taps;
    }
    match mode {
        BorderMode::Clamp => {
            let (x0, x1, fx, cx) = clamp_axis(x, width);
            let (y0, y1, fy, cy) = clamp_axis(y, height);
            // Derivatives vanish along a clamped axis.
            let gx = if cx { 0.0 } else { 1.0 };
            let gy = if cy { 0.0 } else { 1.0 };
            taps.cell = (x0 as i64, y0 as i64, (cx as u8) | ((cy as u8) << 1));
            let corners = [
                (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy) * gx, -(1.0 - fx) * gy),
                (x1, y0, fx * (1.0 - fy), (1.0 - fy) * gx, -fx * gy),
                (x0, y1, (1.0 - fx) * fy, -fy * gx, (1.0 - fx) * gy),
                (x1, y1, fx * fy, fy * gx, fx * gy),
            ];
            for (px, py, w, dx, dy) in corners {
                taps.push(py * width + px, w, dx, dy);
            }
        }
        BorderMode::Zero => {
            if x <= -1.0 || y <= -1.0 || x >= width as f64 || y >= height as f64 {
                taps.cell = (i64::MIN, i64::MIN, 4);
                return taps;
            }
            let xf = floor_fast(x);
            let yf = floor_fast(y);
            let fx = x - xf;
            let fy = y - yf;
            let x0 = xf as i64;
            let y0 = yf as i64;
            taps.cell = (x0, y0, 0);
            let corners = [
                (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
                (x0 + 1, y0, fx * (1.0 - fy), 1.0 - fy, -fx),
                (x0, y0 + 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
                (x0 + 1, y0 + 1, fx * fy, fy, fx),
            ];
            for (px, py, w, dx, dy) in corners {
                if px >= 0 && py >= 0 && (px as usize) < width && (py as usize) < height {
                    taps.push(py as usize * width + px as usize, w, dx, dy);
                }
            }
        }
    }
    taps
}

/// Interpolates all channels of `grid` at `(x, y)` into `out`.
pub fn bilinear_sample_into(grid: &ImageGrid, x: f64, y: f64, mode: BorderMode, out: &mut [f64]) {
    let taps = bilinear_taps(grid.width, grid.height, x, y, mode);
    sample_with_taps(grid, &taps, out);
}

#[inline(always)]
pub(crate) fn sample_with_taps(grid: &ImageGrid, taps: &BilinearTaps, out: &mut [f64]) {
    let ch = grid.channels;
    out[..ch].iter_mut().for_each(|v| *v = 0.0);
    for (p, w) in taps.iter() {
        let px = &grid.data[p * ch..p * ch + ch];
        for (o, s) in out.iter_mut().zip(px) {
            *o += w * s;
        }
    }
}

/// Clamp-to-edge bilinear interpolation at `(x, y)`.
pub fn bilinear_sample(grid: &ImageGrid, x: f64, y: f64) -> Vec<f64> {
    grid.sample(x, y)
}
