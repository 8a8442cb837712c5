//! Plane depth schedules and sparse point sets.

use crate::error::{Error, Result};

pub const DEFAULT_NEAR: f64 = 1.0;
pub const DEFAULT_FAR: f64 = 100.0;

/// Plane depths `d_1 = far > ... > d_D = near`, equally spaced in disparity.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneDepths {
    d_near: f64,
    d_far: f64,
    depths: Vec<f64>,
}

impl PlaneDepths {
    pub fn new(d_near: f64, d_far: f64, count: usize) -> Result<Self> {
        if !(d_near > 0.0 && d_near < d_far && d_far.is_finite()) {
            return Err(Error::InvalidRange(format!(
                "plane range requires 0 < near < far, got near={d_near}, far={d_far}"
            )));
        }
        if count < 2 {
            return Err(Error::InvalidRange(format!(
                "at least 2 planes are required, got {count}"
            )));
        }
        let (inv_far, inv_near) = (1.0 / d_far, 1.0 / d_near);
        let last = (count - 1) as f64;
        let depths = (0..count)
            .map(|i| {
                if i == 0 {
                    d_far
                } else if i == count - 1 {
                    d_near
                } else {
                    1.0 / (inv_far + i as f64 / last * (inv_near - inv_far))
                }
            })
            .collect();
        Ok(Self {
            d_near,
            d_far,
            depths,
        })
    }

    /// Accepts a stored depth list if it matches the schedule for its range.
    pub fn from_depths(d_near: f64, d_far: f64, depths: &[f64]) -> Result<Self> {
        let planes = Self::new(d_near, d_far, depths.len())?;
        for (i, (a, b)) in planes.depths.iter().zip(depths).enumerate() {
            if ((a - b) / a).abs() > 1e-9 {
                return Err(Error::InvalidRange(format!(
                    "depth {i} = {b} is not on the disparity schedule (expected {a})"
                )));
            }
        }
        Ok(planes)
    }

    pub fn near(&self) -> f64 {
        self.d_near
    }

    pub fn far(&self) -> f64 {
        self.d_far
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    /// Depths back to front (index 0 is the farthest plane).
    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn disparities(&self) -> Vec<f64> {
        self.depths.iter().map(|d| 1.0 / d).collect()
    }
}

/// One sparse depth observation at source pixel `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsePoint {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparsePointSet {
    points: Vec<SparsePoint>,
}

impl SparsePointSet {
    pub fn new(points: Vec<SparsePoint>) -> Result<Self> {
        for (index, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(Error::InvalidPoint {
                    index,
                    reason: "non-finite position".into(),
                });
            }
            if !(p.depth > 0.0 && p.depth.is_finite()) {
                return Err(Error::InvalidPoint {
                    index,
                    reason: format!("depth must be positive, got {}", p.depth),
                });
            }
        }
        Ok(Self { points })
    }

    pub fn from_triples(triples: &[(f64, f64, f64)]) -> Result<Self> {
        Self::new(
            triples
                .iter()
                .map(|&(x, y, depth)| SparsePoint { x, y, depth })
                .collect(),
        )
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Checks every point lies on the footprint of a `width x height` image,
    /// `[-0.5, width - 0.5] x [-0.5, height - 0.5]` in pixel-centre coordinates.
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        let (w, h) = (width as f64 - 0.5, height as f64 - 0.5);
        for (index, p) in self.points.iter().enumerate() {
            if !(-0.5..=w).contains(&p.x) || !(-0.5..=h).contains(&p.y) {
                return Err(Error::InvalidPoint {
                    index,
                    reason: format!("({}, {}) outside {width}x{height} image", p.x, p.y),
                });
            }
        }
        Ok(())
    }

    pub fn points(&self) -> &[SparsePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Point set with every depth multiplied by `k`.
    pub fn scaled(&self, k: f64) -> SparsePointSet {
        SparsePointSet {
            points: self
                .points
                .iter()
                .map(|p| SparsePoint {
                    depth: p.depth * k,
                    ..*p
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_planes_are_the_endpoints() {
        assert_eq!(PlaneDepths::new(1.0, 100.0, 2).unwrap().depths(), &[100.0, 1.0]);
    }

    #[test]
    fn three_planes_midpoint_disparity() {
        let p = PlaneDepths::new(1.0, 2.0, 3).unwrap();
        let disp = p.disparities();
        assert_eq!(disp, vec![0.5, 0.75, 1.0]);
        assert!((p.depths()[1] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn thirty_two_planes_affine_in_disparity() {
        let p = PlaneDepths::new(1.0, 100.0, 32).unwrap();
        assert_eq!(p.len(), 32);
        // independent recomputation: fit the line through the endpoints
        let step = (1.0 - 0.01) / 31.0;
        for (i, d) in p.depths().iter().enumerate() {
            let expected = 0.01 + step * i as f64;
            assert!(((1.0 / d - expected) / expected).abs() < 1e-12, "plane {i}");
        }
        assert!(p.depths().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn invalid_ranges() {
        assert!(PlaneDepths::new(0.0, 1.0, 4).is_err());
        assert!(PlaneDepths::new(2.0, 1.0, 4).is_err());
        assert!(PlaneDepths::new(1.0, 1.0, 4).is_err());
        assert!(PlaneDepths::new(1.0, 2.0, 1).is_err());
    }

    #[test]
    fn from_depths_validates_schedule() {
        let p = PlaneDepths::new(1.5, 40.0, 7).unwrap();
        assert_eq!(PlaneDepths::from_depths(1.5, 40.0, p.depths()).unwrap(), p);
        let mut bad = p.depths().to_vec();
        bad[3] *= 1.01;
        assert!(PlaneDepths::from_depths(1.5, 40.0, &bad).is_err());
    }

    #[test]
    fn point_validation() {
        assert!(SparsePointSet::from_triples(&[(1.0, 1.0, 0.0)]).is_err());
        let set = SparsePointSet::from_triples(&[(3.5, 2.0, 4.2)]).unwrap();
        assert!(set.check_bounds(4, 3).is_ok());
        assert!(set.check_bounds(3, 3).is_err());
        assert_eq!(set.scaled(2.0).points()[0].depth, 8.4);
    }
}
