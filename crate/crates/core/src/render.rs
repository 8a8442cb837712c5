//! Multiplane images: plane-induced homographies, warping, over-compositing,
//! disparity synthesis and disocclusion masks.
//!
//! Layer index 0 is the farthest plane and is always opaque. Every layer
//! list is ordered back to front.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::grid::{bilinear_taps, sample_with_taps, BorderMode, ImageGrid};
use crate::planes::PlaneDepths;
use crate::Parallelism;

/// Tolerance on the `[0, 1]` range checks for stored alphas and colors.
const RANGE_SLACK: f64 = 1e-12;

/// D RGBA layers at fixed depths in the frustum of a reference camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Mpi {
    reference: Camera,
    planes: PlaneDepths,
    colors: Vec<ImageGrid>,
    alphas: Vec<ImageGrid>,
}

impl Mpi {
    pub fn new(
        reference: Camera,
        planes: PlaneDepths,
        colors: Vec<ImageGrid>,
        alphas: Vec<ImageGrid>,
    ) -> Result<Self> {
        let d = planes.len();
        if colors.len() != d || alphas.len() != d {
            return Err(Error::InvalidMpi(format!(
                "{d} planes but {} color and {} alpha layers",
                colors.len(),
                alphas.len()
            )));
        }
        let (w, h) = (colors[0].width(), colors[0].height());
        for (i, (c, a)) in colors.iter().zip(&alphas).enumerate() {
            if c.width() != w || c.height() != h || c.channels() != 3 {
                return Err(Error::InvalidMpi(format!(
                    "color layer {i} is {}x{}x{}, expected {w}x{h}x3",
                    c.width(),
                    c.height(),
                    c.channels()
                )));
            }
            if a.width() != w || a.height() != h || a.channels() != 1 {
                return Err(Error::InvalidMpi(format!(
                    "alpha layer {i} is {}x{}x{}, expected {w}x{h}x1",
                    a.width(),
                    a.height(),
                    a.channels()
                )));
            }
            if !in_unit_range(c) {
                return Err(Error::InvalidMpi(format!("color layer {i} leaves [0, 1]")));
            }
            if !in_unit_range(a) {
                return Err(Error::InvalidMpi(format!("alpha layer {i} leaves [0, 1]")));
            }
        }
        if alphas[0].as_slice().iter().any(|&v| (v - 1.0).abs() > RANGE_SLACK) {
            return Err(Error::InvalidMpi("back layer is not opaque".into()));
        }
        Ok(Self {
            reference,
            planes,
            colors,
            alphas,
        })
    }

    pub fn reference(&self) -> &Camera {
        &self.reference
    }

    pub fn planes(&self) -> &PlaneDepths {
        &self.planes
    }

    pub fn colors(&self) -> &[ImageGrid] {
        &self.colors
    }

    pub fn alphas(&self) -> &[ImageGrid] {
        &self.alphas
    }

    pub fn width(&self) -> usize {
        self.colors[0].width()
    }

    pub fn height(&self) -> usize {
        self.colors[0].height()
    }

    pub fn depth_count(&self) -> usize {
        self.planes.len()
    }
}

fn in_unit_range(g: &ImageGrid) -> bool {
    g.as_slice()
        .iter()
        .all(|&v| (-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&v))
}

/// Projective map from homogeneous target pixels to source pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    matrix: Matrix3<f64>,
}

impl Homography {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        let scale = matrix.amax();
        let det = if scale > 0.0 && scale.is_finite() {
            (matrix / scale).determinant()
        } else {
            0.0
        };
        if !(det.abs() > 1e-12) {
            return Err(Error::SingularHomography { det });
        }
        Ok(Self { matrix })
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    /// Pure translation: target pixel `(u, v)` reads source `(u + dx, v + dy)`.
    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            matrix: Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    /// Maps a target pixel to source coordinates; `None` at or beyond the
    /// plane at infinity.
    pub fn apply(&self, u: f64, v: f64) -> Option<(f64, f64)> {
        map_point(&self.matrix, u, v).map(|m| (m.x, m.y))
    }

    /// Matrix product `self * inner`: warping by `self` and then by `inner`
    /// equals a single warp by the product.
    pub fn compose(&self, inner: &Homography) -> Result<Homography> {
        Homography::new(self.matrix * inner.matrix)
    }
}

/// Source position of one target pixel and its derivative with respect to
/// the homography.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mapped {
    pub x: f64,
    pub y: f64,
    q: Vector3<f64>,
}

impl Mapped {
    /// Derivative of the dehomogenized position for a change `dh` of the matrix.
    #[inline]
    pub fn derivative(&self, dh: &Matrix3<f64>, u: f64, v: f64) -> (f64, f64) {
        let dq = dh * Vector3::new(u, v, 1.0);
        let w = self.q.z;
        (
            (dq.x * w - self.q.x * dq.z) / (w * w),
            (dq.y * w - self.q.y * dq.z) / (w * w),
        )
    }
}

const MIN_HOMOGENEOUS_W: f64 = 1e-12;

#[inline]
pub(crate) fn map_point(h: &Matrix3<f64>, u: f64, v: f64) -> Option<Mapped> {
    let q = h * Vector3::new(u, v, 1.0);
    if q.z <= MIN_HOMOGENEOUS_W {
        return None;
    }
    Some(Mapped {
        x: q.x / q.z,
        y: q.y / q.z,
        q,
    })
}

/// Homography for a plane fronto-parallel to `source` at depth `sigma * depth`,
/// together with its derivative with respect to `sigma`.
pub(crate) fn plane_homography_parts(
    source: &Camera,
    target: &Camera,
    depth: f64,
    sigma: f64,
) -> Result<(Matrix3<f64>, Matrix3<f64>)> {
    // target -> source rigid transform: x_s = R x_t + t
    let r = source.rotation() * target.rotation().transpose();
    let t = source.translation() - r * target.translation();
    // plane z_s = sigma * depth in target coordinates: n . x_t = a
    let n = r.transpose() * Vector3::z();
    let a = sigma * depth - t.z;
    if !(a.abs() >= 1e-12) {
        return Err(Error::DegeneratePlane { distance: a });
    }
    // x_s = R x_t + t (n . x_t) / a
    let k_s = source.k();
    let k_t_inv = target.k_inverse();
    let tn = t * n.transpose();
    let h = k_s * (r + tn / a) * k_t_inv;
    let dh = k_s * (tn * (-depth / (a * a))) * k_t_inv;
    Ok((h, dh))
}

/// Homography mapping target pixels to source pixels through the plane
/// fronto-parallel to `source` at `plane_depth` (already scaled).
pub fn plane_homography(source: &Camera, target: &Camera, plane_depth: f64) -> Result<Homography> {
    if !(plane_depth > 0.0) {
        return Err(Error::InvalidRange(format!(
            "plane depth must be positive, got {plane_depth}"
        )));
    }
    let (h, _) = plane_homography_parts(source, target, plane_depth, 1.0)?;
    Homography::new(h)
}

/// Resamples `image` into an `out_width x out_height` grid through `h`.
pub fn warp_image(
    image: &ImageGrid,
    h: &Homography,
    out_width: usize,
    out_height: usize,
    outside: BorderMode,
) -> Result<ImageGrid> {
    let mut out = ImageGrid::new(out_width, out_height, image.channels())?;
    warp_into(image, h.matrix(), outside, out.as_mut_slice(), out_width);
    Ok(out)
}

pub(crate) fn warp_into(
    image: &ImageGrid,
    h: &Matrix3<f64>,
    outside: BorderMode,
    out: &mut [f64],
    out_width: usize,
) {
    let ch = image.channels();
    let (mut x, mut y) = (0usize, 0usize);
    for px in out.chunks_exact_mut(ch) {
        let (u, v) = (x as f64, y as f64);
        x += 1;
        if x == out_width {
            (x, y) = (0, y + 1);
        }
        match map_point(h, u, v) {
            Some(m) => {
                let taps = bilinear_taps(image.width(), image.height(), m.x, m.y, outside);
                sample_with_taps(image, &taps, px);
            }
            None => px.iter_mut().for_each(|s| *s = 0.0),
        }
    }
}

fn check_layers(colors: &[ImageGrid], alphas: &[ImageGrid]) -> Result<()> {
    if colors.is_empty() || colors.len() != alphas.len() {
        return Err(Error::mismatch("layer count", colors.len(), alphas.len()));
    }
    let ch = colors[0].channels();
    for (c, a) in colors.iter().zip(alphas) {
        c.check_same_size(&colors[0], "composite color layer")?;
        a.check_same_size(&colors[0], "composite alpha layer")?;
        if a.channels() != 1 {
            return Err(Error::mismatch("alpha channels", 1, a.channels()));
        }
        if c.channels() != ch {
            return Err(Error::mismatch("color channels", ch, c.channels()));
        }
    }
    Ok(())
}

/// Back-to-front over-compositing, `sum_i c_i a_i prod_{j>i} (1 - a_j)`.
pub fn composite_over(colors: &[ImageGrid], alphas: &[ImageGrid]) -> Result<ImageGrid> {
    check_layers(colors, alphas)?;
    let mut out = colors[0].zeros_like();
    let ch = out.channels();
    for (c, a) in colors.iter().zip(alphas) {
        for ((o, cp), &ap) in out
            .as_mut_slice()
            .chunks_exact_mut(ch)
            .zip(c.as_slice().chunks_exact(ch))
            .zip(a.as_slice())
        {
            for (ov, cv) in o.iter_mut().zip(cp) {
                *ov = cv * ap + (1.0 - ap) * *ov;
            }
        }
    }
    Ok(out)
}

/// Per-pixel compositing weights `a_i prod_{j>i} (1 - a_j)`, back to front.
pub fn compositing_weights(alphas: &[ImageGrid]) -> Vec<ImageGrid> {
    let weights = blend_weights(alphas);
    alphas
        .iter()
        .zip(&weights)
        .map(|(a, w)| {
            let data = a.as_slice().iter().zip(w.as_slice()).map(|(a, w)| a * w).collect();
            ImageGrid::from_vec(a.width(), a.height(), 1, data).expect("same shape")
        })
        .collect()
}

/// Warps every layer of `mpi` into `target` (planes at `sigma * d_i`) and
/// composites. Output has the MPI's pixel dimensions.
pub fn render_view(mpi: &Mpi, target: &Camera, sigma: f64) -> Result<ImageGrid> {
    render_view_with(mpi, target, sigma, Parallelism::Serial)
}

pub fn render_view_with(
    mpi: &Mpi,
    target: &Camera,
    sigma: f64,
    parallelism: Parallelism,
) -> Result<ImageGrid> {
    let (colors, alphas) = warp_layers(mpi, target, sigma, parallelism)?;
    composite_over(&colors, &alphas)
}

/// Warped `(colors, alphas)` of every layer; alphas use zero borders and
/// colors clamp to the edge.
pub fn warp_layers(
    mpi: &Mpi,
    target: &Camera,
    sigma: f64,
    parallelism: Parallelism,
) -> Result<(Vec<ImageGrid>, Vec<ImageGrid>)> {
    check_sigma(sigma)?;
    let (w, h) = (mpi.width(), mpi.height());
    let warp_one = |i: usize| -> Result<(ImageGrid, ImageGrid)> {
        let (hm, _) =
            plane_homography_parts(mpi.reference(), target, mpi.planes().depths()[i], sigma)?;
        let mut c = ImageGrid::new(w, h, 3)?;
        let mut a = ImageGrid::new(w, h, 1)?;
        warp_into(&mpi.colors[i], &hm, BorderMode::Clamp, c.as_mut_slice(), w);
        warp_into(&mpi.alphas[i], &hm, BorderMode::Zero, a.as_mut_slice(), w);
        Ok((c, a))
    };
    let layers: Vec<(ImageGrid, ImageGrid)> = match parallelism {
        Parallelism::Serial => (0..mpi.depth_count()).map(warp_one).collect::<Result<_>>()?,
        Parallelism::Parallel => (0..mpi.depth_count())
            .into_par_iter()
            .map(warp_one)
            .collect::<Result<_>>()?,
    };
    Ok(layers.into_iter().unzip())
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidRange(format!("sigma must be positive, got {sigma}")))
    }
}

/// Composited inverse depth in the reference view.
pub fn disparity_map(mpi: &Mpi) -> ImageGrid {
    disparity_from_alphas(mpi.alphas(), mpi.planes())
}

pub(crate) fn disparity_from_alphas(alphas: &[ImageGrid], planes: &PlaneDepths) -> ImageGrid {
    let mut out = alphas[0].zeros_like();
    for (a, d) in alphas.iter().zip(planes.depths()) {
        let inv = 1.0 / d;
        for (o, &ap) in out.as_mut_slice().iter_mut().zip(a.as_slice()) {
            *o = inv * ap + (1.0 - ap) * *o;
        }
    }
    out
}

/// Transmittance in front of each layer, `w_i = prod_{j>i} (1 - a_j)`.
pub fn blend_weights(alphas: &[ImageGrid]) -> Vec<ImageGrid> {
    let d = alphas.len();
    let mut weights = vec![alphas[d - 1].map(|_| 1.0); d];
    for i in (0..d - 1).rev() {
        let (lo, hi) = weights.split_at_mut(i + 1);
        for ((w, &wn), &an) in lo[i]
            .as_mut_slice()
            .iter_mut()
            .zip(hi[0].as_slice())
            .zip(alphas[i + 1].as_slice())
        {
            *w = wn * (1.0 - an);
        }
    }
    weights
}

/// Layer colors blending the source image (visible content) with the
/// background image (occluded content): `c_i = w_i I_s + (1 - w_i) I_bg`.
pub fn layer_colors(
    source: &ImageGrid,
    background: &ImageGrid,
    weights: &[ImageGrid],
) -> Result<Vec<ImageGrid>> {
    source.check_same_shape(background, "background image")?;
    weights
        .iter()
        .map(|w| {
            source.check_same_size(w, "blend weights")?;
            let ch = source.channels();
            let data = source
                .as_slice()
                .chunks_exact(ch)
                .zip(background.as_slice().chunks_exact(ch))
                .zip(w.as_slice())
                .flat_map(|((s, b), &wp)| {
                    s.iter()
                        .zip(b)
                        .map(move |(sv, bv)| wp * sv + (1.0 - wp) * bv)
                })
                .collect();
            ImageGrid::from_vec(source.width(), source.height(), ch, data)
        })
        .collect()
}

/// Fraction of each target pixel whose composited value comes from content
/// hidden in the reference view: `1 - sum_i w'_i a'_i prod_{j>i} (1 - a'_j)`.
pub fn disocclusion_mask(
    mpi: &Mpi,
    weights: &[ImageGrid],
    target: &Camera,
    sigma: f64,
) -> Result<ImageGrid> {
    check_sigma(sigma)?;
    if weights.len() != mpi.depth_count() {
        return Err(Error::mismatch("blend weight layers", mpi.depth_count(), weights.len()));
    }
    let (w, h) = (mpi.width(), mpi.height());
    let mut visible = ImageGrid::new(w, h, 1)?;
    let mut wa = vec![0.0; w * h];
    let mut aa = vec![0.0; w * h];
    for (i, weight) in weights.iter().enumerate() {
        weight.check_same_shape(&mpi.alphas[i], "blend weights")?;
        let (hm, _) =
            plane_homography_parts(mpi.reference(), target, mpi.planes().depths()[i], sigma)?;
        warp_into(weight, &hm, BorderMode::Zero, &mut wa, w);
        warp_into(&mpi.alphas[i], &hm, BorderMode::Zero, &mut aa, w);
        for ((o, &wv), &av) in visible.as_mut_slice().iter_mut().zip(&wa).zip(&aa) {
            *o = wv * av + (1.0 - av) * *o;
        }
    }
    Ok(visible.map(|v| 1.0 - v))
}
