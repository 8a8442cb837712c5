//! Scale alignment between an MPI's disparity and a sparse point set.

use crate::error::{Error, Result};
use crate::grid::{bilinear_taps, BorderMode, ImageGrid};
use crate::planes::SparsePointSet;

/// Sampled disparities at or below this are rejected.
pub const MIN_SAMPLED_DISPARITY: f64 = 1e-12;

/// Positive finite factor applied to all plane depths before rendering.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct ScaleFactor(f64);

impl ScaleFactor {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma > 0.0 && sigma.is_finite() {
            Ok(Self(sigma))
        } else {
            Err(Error::InvalidRange(format!("scale factor must be positive and finite, got {sigma}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Bilinear (clamped) disparity samples at each point's position.
pub(crate) fn sample_disparities(disparity: &ImageGrid, points: &SparsePointSet) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    if disparity.channels() != 1 {
        return Err(Error::mismatch("disparity channels", 1, disparity.channels()));
    }
    points
        .points()
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let taps = bilinear_taps(disparity.width(), disparity.height(), p.x, p.y, BorderMode::Clamp);
            let value: f64 = taps.iter().map(|(px, w)| w * disparity.as_slice()[px]).sum();
            if value > MIN_SAMPLED_DISPARITY {
                Ok(value)
            } else {
                Err(Error::NonPositiveDisparity { index, x: p.x, y: p.y, value })
            }
        })
        .collect()
}

/// Mean log-ratio `ln D(x, y) - ln(1/d)` over the points.
pub(crate) fn log_scale(samples: &[f64], points: &SparsePointSet) -> f64 {
    let sum: f64 = samples
        .iter()
        .zip(points.points())
        .map(|(s, p)| s.ln() + p.depth.ln())
        .sum();
    sum / samples.len() as f64
}

/// Scale factor minimizing the squared log-disparity error between the
/// disparity map and the points: the geometric mean of `D(x, y) * d`.
pub fn compute_scale(disparity: &ImageGrid, points: &SparsePointSet) -> Result<ScaleFactor> {
    let samples = sample_disparities(disparity, points)?;
    ScaleFactor::new(log_scale(&samples, points).exp())
}
