//! Training objective: L1 view synthesis, edge-aware disparity smoothness and
//! sparse log-disparity supervision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::planes::SparsePointSet;
use crate::scale::{sample_disparities, ScaleFactor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_d: f64,
    pub e_min: f64,
    pub g_min: f64,
    /// Weight of the optional Sobel-gradient L1 term in the pixel loss.
    pub gradient_term_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_p: 1.0,
            lambda_s: 0.5,
            lambda_d: 0.1,
            e_min: 0.1,
            g_min: 0.05,
            gradient_term_weight: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_p", self.lambda_p),
            ("lambda_s", self.lambda_s),
            ("lambda_d", self.lambda_d),
            ("g_min", self.g_min),
            ("gradient_term_weight", self.gradient_term_weight),
        ];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.e_min > 0.0 && self.e_min <= 1.0) {
            return Err(Error::InvalidConfig(format!("e_min must be in (0, 1], got {}", self.e_min)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pixel: f64,
    pub smooth: f64,
    pub depth: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(pixel: f64, smooth: f64, depth: f64, config: &LossConfig) -> Self {
        Self {
            pixel,
            smooth,
            depth,
            total: config.lambda_p * pixel + config.lambda_s * smooth + config.lambda_d * depth,
        }
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[inline]
fn clamp_index(i: usize, delta: isize, n: usize) -> usize {
    (i as isize + delta).clamp(0, n as isize - 1) as usize
}

/// Per-channel horizontal and vertical Sobel responses, replicate padding.
/// Positive and negative taps are summed separately, so constant regions
/// give exactly zero.
pub fn sobel(image: &ImageGrid) -> (ImageGrid, ImageGrid) {
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    let mut gx = image.zeros_like();
    let mut gy = image.zeros_like();
    let src = image.as_slice();
    for y in 0..h {
        let rows = [clamp_index(y, -1, h), y, clamp_index(y, 1, h)];
        for x in 0..w {
            let cols = [clamp_index(x, -1, w), x, clamp_index(x, 1, w)];
            let o = (y * w + x) * ch;
            for c in 0..ch {
                let v = |r: usize, k: usize| src[(rows[r] * w + cols[k]) * ch + c];
                let right = v(0, 2) + 2.0 * v(1, 2) + v(2, 2);
                let left = v(0, 0) + 2.0 * v(1, 0) + v(2, 0);
                let below = v(2, 0) + 2.0 * v(2, 1) + v(2, 2);
                let above = v(0, 0) + 2.0 * v(0, 1) + v(0, 2);
                gx.as_mut_slice()[o + c] = right - left;
                gy.as_mut_slice()[o + c] = below - above;
            }
        }
    }
    (gx, gy)
}

/// Adjoint of [`sobel`]: accumulates into `out` the image gradient implied by
/// upstream gradients on the two responses.
pub(crate) fn sobel_adjoint(d_gx: &ImageGrid, d_gy: &ImageGrid, out: &mut ImageGrid) {
    let (w, h, ch) = (out.width(), out.height(), out.channels());
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * ch;
            for (ky, dy) in (-1isize..=1).enumerate() {
                let yy = clamp_index(y, dy, h);
                for (kx, dx) in (-1isize..=1).enumerate() {
                    let (wx, wy) = (SOBEL_X[ky][kx], SOBEL_Y[ky][kx]);
                    if wx == 0.0 && wy == 0.0 {
                        continue;
                    }
                    let s = (yy * w + clamp_index(x, dx, w)) * ch;
                    for c in 0..ch {
                        out.as_mut_slice()[s + c] +=
                            wx * d_gx.as_slice()[o + c] + wy * d_gy.as_slice()[o + c];
                    }
                }
            }
        }
    }
}

/// Sum over channels of `|g_x| + |g_y|`; single-channel output.
pub fn gradient_norm(image: &ImageGrid) -> ImageGrid {
    let (gx, gy) = sobel(image);
    let ch = image.channels();
    let data = gx
        .as_slice()
        .chunks_exact(ch)
        .zip(gy.as_slice().chunks_exact(ch))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.abs() + y.abs()).sum())
        .collect();
    ImageGrid::from_vec(image.width(), image.height(), 1, data).expect("same size")
}

/// Source edge mask `min(G / (e_min * max G), 1)`; all zero when `max G = 0`.
pub fn edge_mask(source: &ImageGrid, e_min: f64) -> Result<ImageGrid> {
    if !(e_min > 0.0) {
        return Err(Error::InvalidConfig(format!("e_min must be positive, got {e_min}")));
    }
    let g = gradient_norm(source);
    let max = g.as_slice().iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(g.zeros_like());
    }
    let denom = e_min * max;
    Ok(g.map(|v| (v / denom).min(1.0)))
}

/// Mean over pixels of `max(G(D) - g_min, 0) * (1 - E)`.
pub fn smoothness_loss(disparity: &ImageGrid, edge_mask: &ImageGrid, g_min: f64) -> Result<f64> {
    disparity.check_same_shape(edge_mask, "smoothness edge mask")?;
    let g = gradient_norm(disparity);
    let sum: f64 = g
        .as_slice()
        .iter()
        .zip(edge_mask.as_slice())
        .map(|(gv, e)| (gv - g_min).max(0.0) * (1.0 - e))
        .sum();
    Ok(sum / disparity.pixel_count() as f64)
}

/// Sum over channels of the mean absolute difference, plus
/// `gradient_term_weight` times the same statistic on both Sobel responses.
pub fn pixel_loss(rendered: &ImageGrid, target: &ImageGrid, gradient_term_weight: f64) -> Result<f64> {
    rendered.check_same_shape(target, "pixel loss")?;
    let n = rendered.pixel_count() as f64;
    let l1 = |a: &ImageGrid, b: &ImageGrid| -> f64 {
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
    };
    let mut loss = l1(rendered, target);
    if gradient_term_weight != 0.0 {
        let (rx, ry) = sobel(rendered);
        let (tx, ty) = sobel(target);
        loss += gradient_term_weight * (l1(&rx, &tx) + l1(&ry, &ty));
    }
    Ok(loss)
}

/// Mean over points of `(ln(D(x, y) / sigma) - ln(1/d))^2`.
pub fn depth_loss(disparity: &ImageGrid, points: &SparsePointSet, sigma: ScaleFactor) -> Result<f64> {
    let samples = sample_disparities(disparity, points)?;
    let ln_sigma = sigma.value().ln();
    let sum: f64 = samples
        .iter()
        .zip(points.points())
        .map(|(s, p)| {
            let r = s.ln() - ln_sigma + p.depth.ln();
            r * r
        })
        .sum();
    Ok(sum / samples.len() as f64)
}

/// Everything the objective needs for one source/target pair.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub rendered: &'a ImageGrid,
    pub target: &'a ImageGrid,
    pub disparity: &'a ImageGrid,
    pub edge_mask: &'a ImageGrid,
    /// May be empty, in which case the depth term is zero.
    pub points: &'a SparsePointSet,
    pub sigma: ScaleFactor,
}

pub fn total_loss(inputs: &LossInputs<'_>, config: &LossConfig) -> Result<LossBreakdown> {
    let pixel = pixel_loss(inputs.rendered, inputs.target, config.gradient_term_weight)?;
    let smooth = smoothness_loss(inputs.disparity, inputs.edge_mask, config.g_min)?;
    let depth = if inputs.points.is_empty() {
        0.0
    } else {
        depth_loss(inputs.disparity, inputs.points, inputs.sigma)?
    };
    Ok(LossBreakdown::combine(pixel, smooth, depth, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn step_image() -> ImageGrid {
        // 4 wide, 3 tall, columns [0, 0, 1, 1]
        ImageGrid::from_fn(4, 3, 1, |x, _, _| if x >= 2 { 1.0 } else { 0.0 }).unwrap()
    }

    #[test]
    fn constant_image_has_zero_gradient() {
        let g = gradient_norm(&ImageGrid::filled(5, 4, 3, 0.7).unwrap());
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_convolved_step() {
        let g = gradient_norm(&step_image());
        for y in 0..3 {
            assert_eq!(g.get(1, y, 0), 4.0);
            assert_eq!(g.get(2, y, 0), 4.0);
            assert_eq!(g.get(0, y, 0), 0.0);
            assert_eq!(g.get(3, y, 0), 0.0);
        }
    }

    #[test]
    fn channel_sum_is_linear() {
        let one = step_image();
        let two = ImageGrid::from_fn(4, 3, 2, |x, y, _| one.get(x, y, 0)).unwrap();
        let (g1, g2) = (gradient_norm(&one), gradient_norm(&two));
        assert!(g1.as_slice().iter().zip(g2.as_slice()).all(|(a, b)| 2.0 * a == *b));
    }

    #[test]
    fn sobel_adjoint_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ImageGrid::from_fn(6, 5, 2, |_, _, _| rng.gen()).unwrap();
        let ux = ImageGrid::from_fn(6, 5, 2, |_, _, _| rng.gen()).unwrap();
        let uy = ImageGrid::from_fn(6, 5, 2, |_, _, _| rng.gen()).unwrap();
        let (gx, gy) = sobel(&img);
        let lhs: f64 = gx.as_slice().iter().zip(ux.as_slice()).map(|(a, b)| a * b).sum::<f64>()
            + gy.as_slice().iter().zip(uy.as_slice()).map(|(a, b)| a * b).sum::<f64>();
        let mut adj = img.zeros_like();
        sobel_adjoint(&ux, &uy, &mut adj);
        let rhs: f64 = adj.as_slice().iter().zip(img.as_slice()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn edge_mask_examples() {
        assert!(edge_mask(&ImageGrid::filled(4, 4, 3, 0.2).unwrap(), 0.1).unwrap().as_slice().iter().all(|&v| v == 0.0));
        let e = edge_mask(&step_image(), 0.1).unwrap();
        assert!(e.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(e.get(1, 0, 0), 1.0);
        assert_eq!(e.get(0, 0, 0), 0.0);
        let e = edge_mask(&step_image(), 1.0).unwrap();
        assert_eq!(e.get(2, 1, 0), 1.0);
        assert!(edge_mask(&step_image(), 0.0).is_err());
    }

    #[test]
    fn smoothness_examples() {
        let flat = ImageGrid::filled(4, 3, 1, 0.3).unwrap();
        let zero = flat.zeros_like();
        assert_eq!(smoothness_loss(&flat, &zero, 0.05).unwrap(), 0.0);
        let disp = step_image().map(|v| v * 0.0625); // G = 0.25 at 6 pixels
        let ones = ImageGrid::filled(4, 3, 1, 1.0).unwrap();
        assert_eq!(smoothness_loss(&disp, &ones, 0.05).unwrap(), 0.0);
        // columns 1 and 2 of every row carry G = 0.25; keep only 4 of them unmasked
        let mask = ImageGrid::from_fn(4, 3, 1, |_, y, _| if y == 2 { 1.0 } else { 0.0 }).unwrap();
        let l = smoothness_loss(&disp, &mask, 0.05).unwrap();
        assert!((l - 4.0 * 0.20 / 12.0).abs() < 1e-15, "{l}");
        assert!((l - 0.0667).abs() < 1e-4);
    }

    #[test]
    fn pixel_loss_examples() {
        let a = ImageGrid::filled(3, 3, 3, 0.5).unwrap();
        assert_eq!(pixel_loss(&a, &a, 0.3).unwrap(), 0.0);
        let b = ImageGrid::filled(3, 3, 3, 0.75).unwrap();
        assert!((pixel_loss(&a, &b, 0.0).unwrap() - 0.75).abs() < 1e-15);
        assert!(pixel_loss(&a, &ImageGrid::filled(3, 3, 1, 0.0).unwrap(), 0.0).is_err());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn pixel_loss_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = ImageGrid::from_fn(8, 8, 3, |_, _, _| rng.gen()).unwrap();
        let b = ImageGrid::from_fn(8, 8, 3, |_, _, _| rng.gen()).unwrap();
        // independent Sobel: explicit 3x3 loops with clamped reads
        let response = |img: &ImageGrid, x: usize, y: usize, c: usize, kernel: &[[f64; 3]; 3]| {
            let mut s = 0.0;
            for j in 0..3 {
                for i in 0..3 {
                    let xx = (x as i64 + i as i64 - 1).clamp(0, 7) as usize;
                    let yy = (y as i64 + j as i64 - 1).clamp(0, 7) as usize;
                    s += kernel[j][i] * img.get(xx, yy, c);
                }
            }
            s
        };
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        let mut expected = 0.0;
        for c in 0..3 {
            let mut plain = 0.0;
            let mut grad = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    plain += (a.get(x, y, c) - b.get(x, y, c)).abs();
                    grad += (response(&a, x, y, c, &kx) - response(&b, x, y, c, &kx)).abs();
                    grad += (response(&a, x, y, c, &ky) - response(&b, x, y, c, &ky)).abs();
                }
            }
            expected += plain / 64.0 + 0.5 * grad / 64.0;
        }
        assert!((pixel_loss(&a, &b, 0.5).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_examples() {
        let disp = ImageGrid::filled(4, 4, 1, 0.5).unwrap();
        let points = SparsePointSet::from_triples(&[(1.0, 1.0, 4.0), (2.0, 2.0, 16.0)]).unwrap();
        let l = depth_loss(&disp, &points, ScaleFactor::new(4.0).unwrap()).unwrap();
        assert!((l - 2f64.ln().powi(2)).abs() < 1e-15);
        assert!((l - 0.4805).abs() < 1e-4);
        let exact = SparsePointSet::from_triples(&[(1.0, 1.0, 6.0)]).unwrap();
        // D = sigma / d: 0.5 = 3 / 6
        assert!(depth_loss(&disp, &exact, ScaleFactor::new(3.0).unwrap()).unwrap().abs() < 1e-30);
    }

    #[test]
    fn total_recombines_components() {
        let config = LossConfig::default();
        let b = LossBreakdown::combine(0.75, 4.0 * 0.2 / 12.0, 2f64.ln().powi(2), &config);
        assert!((b.total - 0.8314).abs() < 1e-4);
        let zero = LossBreakdown::combine(0.0, 0.0, 0.0, &config);
        assert_eq!(zero.total, 0.0);
    }

    #[test]
    fn ablation_total_is_pixel_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = ImageGrid::from_fn(6, 6, 3, |_, _, _| rng.gen()).unwrap();
        let b = ImageGrid::from_fn(6, 6, 3, |_, _, _| rng.gen()).unwrap();
        let disp = ImageGrid::from_fn(6, 6, 1, |_, _, _| rng.gen_range(0.1..1.0)).unwrap();
        let edges = edge_mask(&a, 0.1).unwrap();
        let points = SparsePointSet::from_triples(&[(2.0, 3.0, 2.0)]).unwrap();
        let config = LossConfig { lambda_s: 0.0, lambda_d: 0.0, ..Default::default() };
        let inputs = LossInputs {
            rendered: &a,
            target: &b,
            disparity: &disp,
            edge_mask: &edges,
            points: &points,
            sigma: ScaleFactor::new(1.3).unwrap(),
        };
        let out = total_loss(&inputs, &config).unwrap();
        assert_eq!(out.total, out.pixel);
        let full = total_loss(&inputs, &LossConfig::default()).unwrap();
        assert!((full.total - (full.pixel + 0.5 * full.smooth + 0.1 * full.depth)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn losses_nonnegative_and_symmetric(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = ImageGrid::from_fn(5, 4, 3, |_, _, _| rng.gen()).unwrap();
            let b = ImageGrid::from_fn(5, 4, 3, |_, _, _| rng.gen()).unwrap();
            let ab = pixel_loss(&a, &b, 0.2).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - pixel_loss(&b, &a, 0.2).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn smoothness_shift_invariant(seed in 0u64..500, shift in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = ImageGrid::from_fn(6, 5, 1, |_, _, _| rng.gen()).unwrap();
            let e = ImageGrid::from_fn(6, 5, 1, |_, _, _| rng.gen()).unwrap();
            let l1 = smoothness_loss(&d, &e, 0.05).unwrap();
            let l2 = smoothness_loss(&d.map(|v| v + shift), &e, 0.05).unwrap();
            prop_assert!(l1 >= 0.0);
            prop_assert!((l1 - l2).abs() < 1e-12);
        }

        #[test]
        fn edge_mask_scale_invariant(seed in 0u64..500, k in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = ImageGrid::from_fn(6, 5, 3, |_, _, _| rng.gen()).unwrap();
            let e1 = edge_mask(&img, 0.1).unwrap();
            let e2 = edge_mask(&img.map(|v| v * k), 0.1).unwrap();
            prop_assert!(e1.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(e1.max_abs_diff(&e2) < 1e-12);
        }
    }
}
