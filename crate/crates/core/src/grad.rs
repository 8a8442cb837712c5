//! Reverse-mode derivatives of the training objective with respect to the
//! optimizable MPI parameterization, and a central-difference checker.
//!
//! The pipeline is small and fixed, so each stage has a hand-written adjoint
//! instead of a general tape:
//!
//! ```text
//! logits -> alphas -> blend weights -> layer colors -+-> warp -> composite -> pixel loss
//!                  \-> disparity -> smoothness loss   |
//!                                \-> scale (sigma) ---+-> depth loss
//! ```
//!
//! The scale factor is a function of the disparity map and is differentiated
//! through, including its effect on the warps. At non-differentiable points
//! (`|x|` at 0, the smoothness hinge at its threshold) the derivative is 0.

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::grid::{bilinear_taps, sample_with_taps, BilinearTaps, BorderMode, ImageGrid};
use crate::loss::{edge_mask, sobel, sobel_adjoint, LossBreakdown, LossConfig};
use crate::planes::{PlaneDepths, SparsePointSet};
use crate::render::{
    blend_weights, disparity_from_alphas, layer_colors, map_point, plane_homography_parts, Mpi,
};
use crate::scale::{log_scale, sample_disparities};
use crate::Parallelism;

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Directly optimized MPI parameters.
///
/// `alpha_logits[k]` drives layer `k + 1` (the back layer is fixed opaque).
/// The background image is `(1 - bg_blend) * I_s + bg_blend * logistic(bg_logits)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MpiParams {
    pub alpha_logits: Vec<ImageGrid>,
    pub bg_logits: ImageGrid,
    pub planes: PlaneDepths,
    pub reference: Camera,
    pub bg_blend: f64,
}

impl MpiParams {
    pub fn width(&self) -> usize {
        self.bg_logits.width()
    }

    pub fn height(&self) -> usize {
        self.bg_logits.height()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_logits.len() + 1 != self.planes.len() {
            return Err(Error::mismatch(
                "alpha logit layers",
                self.planes.len() - 1,
                self.alpha_logits.len(),
            ));
        }
        if self.bg_logits.channels() != 3 {
            return Err(Error::mismatch("background channels", 3, self.bg_logits.channels()));
        }
        for a in &self.alpha_logits {
            a.check_same_size(&self.bg_logits, "alpha logits")?;
            if a.channels() != 1 {
                return Err(Error::mismatch("alpha logit channels", 1, a.channels()));
            }
        }
        if !(0.0..=1.0).contains(&self.bg_blend) {
            return Err(Error::InvalidRange(format!(
                "background blend must be in [0, 1], got {}",
                self.bg_blend
            )));
        }
        Ok(())
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        self.alpha_logits.iter().map(|g| g.as_slice().len()).sum::<usize>()
            + self.bg_logits.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.alpha_logits
            .iter_mut()
            .map(|g| g.as_mut_slice())
            .chain(std::iter::once(self.bg_logits.as_mut_slice()))
    }

    pub(crate) fn get_flat(&self, mut index: usize) -> f64 {
        for g in self.alpha_logits.iter().chain(std::iter::once(&self.bg_logits)) {
            let n = g.as_slice().len();
            if index < n {
                return g.as_slice()[index];
            }
            index -= n;
        }
        panic!("parameter index out of range")
    }

    pub(crate) fn set_flat(&mut self, mut index: usize, value: f64) {
        for s in self.slices_mut() {
            let n = s.len();
            if index < n {
                s[index] = value;
                return;
            }
            index -= n;
        }
        panic!("parameter index out of range")
    }
}

/// Gradients mirroring [`MpiParams`]' optimizable entries.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub d_alpha_logits: Vec<ImageGrid>,
    pub d_bg_logits: ImageGrid,
}

impl GradientSet {
    pub fn zeros_like(params: &MpiParams) -> Self {
        Self {
            d_alpha_logits: params.alpha_logits.iter().map(ImageGrid::zeros_like).collect(),
            d_bg_logits: params.bg_logits.zeros_like(),
        }
    }

    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.d_alpha_logits
            .iter()
            .map(|g| g.as_slice())
            .chain(std::iter::once(self.d_bg_logits.as_slice()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().flat_map(|s| s.iter().copied()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.slices().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.slices().flatten().all(|v| v.is_finite())
    }
}

/// How the scale factor is chosen during evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SigmaMode {
    /// Aligned to the source point set on every evaluation.
    Estimated,
    /// Held at a constant.
    Fixed(f64),
}

/// Source image, posed targets and sparse points for one scene.
#[derive(Clone, Debug)]
pub struct Problem {
    pub source_image: ImageGrid,
    pub targets: Vec<(Camera, ImageGrid)>,
    pub points: SparsePointSet,
    pub sigma_mode: SigmaMode,
}

impl Problem {
    pub fn new(
        source_image: ImageGrid,
        targets: Vec<(Camera, ImageGrid)>,
        points: SparsePointSet,
        sigma_mode: SigmaMode,
    ) -> Result<Self> {
        if source_image.channels() != 3 {
            return Err(Error::mismatch("source image channels", 3, source_image.channels()));
        }
        if targets.is_empty() {
            return Err(Error::InvalidConfig("at least one target view is required".into()));
        }
        for (_, img) in &targets {
            source_image.check_same_shape(img, "target image")?;
        }
        points.check_bounds(source_image.width(), source_image.height())?;
        match sigma_mode {
            SigmaMode::Estimated if points.is_empty() => return Err(Error::EmptyPointSet),
            SigmaMode::Fixed(s) if !(s > 0.0 && s.is_finite()) => {
                return Err(Error::InvalidRange(format!("fixed sigma must be positive, got {s}")))
            }
            _ => {}
        }
        Ok(Self {
            source_image,
            targets,
            points,
            sigma_mode,
        })
    }

    /// Same scene restricted to a single target.
    pub fn with_single_target(&self, index: usize) -> Problem {
        Problem {
            source_image: self.source_image.clone(),
            targets: vec![self.targets[index].clone()],
            points: self.points.clone(),
            sigma_mode: self.sigma_mode,
        }
    }
}

/// Per-evaluation by-products.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub sigma: f64,
}

struct Materialized {
    alphas: Vec<ImageGrid>,
    bg_sigmoid: ImageGrid,
    background: ImageGrid,
    weights: Vec<ImageGrid>,
    colors: Vec<ImageGrid>,
    disparity: ImageGrid,
}

fn materialize_parts(params: &MpiParams, source: &ImageGrid) -> Result<Materialized> {
    params.validate()?;
    source.check_same_shape(&params.bg_logits, "source image")?;
    let mut alphas = Vec::with_capacity(params.planes.len());
    alphas.push(ImageGrid::filled(params.width(), params.height(), 1, 1.0)?);
    alphas.extend(params.alpha_logits.iter().map(|l| l.map(logistic)));
    let bg_sigmoid = params.bg_logits.map(logistic);
    let beta = params.bg_blend;
    let background = ImageGrid::from_vec(
        source.width(),
        source.height(),
        3,
        source
            .as_slice()
            .iter()
            .zip(bg_sigmoid.as_slice())
            .map(|(s, b)| (1.0 - beta) * s + beta * b)
            .collect(),
    )?;
    let weights = blend_weights(&alphas);
    let colors = layer_colors(source, &background, &weights)?;
    let disparity = disparity_from_alphas(&alphas, &params.planes);
    Ok(Materialized {
        alphas,
        bg_sigmoid,
        background,
        weights,
        colors,
        disparity,
    })
}

/// Builds the MPI described by `params` for the given source image.
pub fn materialize(params: &MpiParams, source_image: &ImageGrid) -> Result<Mpi> {
    let m = materialize_parts(params, source_image)?;
    Mpi::new(params.reference.clone(), params.planes.clone(), m.colors, m.alphas)
}

/// FNV-1a over the discrete state of an evaluation; two evaluations with the
/// same signature lie in the same smooth piece of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Signature(u64);

impl Signature {
    fn new() -> Self {
        Signature(0xcbf2_9ce4_8422_2325)
    }

    #[inline]
    fn mix(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    #[inline]
    fn sign(&mut self, v: f64) {
        self.mix(if v > 0.0 {
            1
        } else if v < 0.0 {
            2
        } else {
            3
        });
    }

    #[inline]
    fn taps(&mut self, t: &BilinearTaps) {
        self.mix(t.cell.0 as u64);
        self.mix(t.cell.1 as u64);
        self.mix(t.cell.2 as u64);
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct LayerWarp {
    h: Matrix3<f64>,
    dh: Matrix3<f64>,
    colors: Vec<f64>,
    alphas: Vec<f64>,
    signature: u64,
}

fn warp_layer(
    color: &ImageGrid,
    alpha: &ImageGrid,
    h: Matrix3<f64>,
    dh: Matrix3<f64>,
    track: bool,
) -> LayerWarp {
    let (w, hgt) = (color.width(), color.height());
    let n = w * hgt;
    let mut colors = vec![0.0; n * 3];
    let mut alphas = vec![0.0; n];
    let mut sig = Signature::new();
    let (mut x, mut y) = (0usize, 0usize);
    for p in 0..n {
        let (u, v) = (x as f64, y as f64);
        x += 1;
        if x == w {
            (x, y) = (0, y + 1);
        }
        let Some(m) = map_point(&h, u, v) else {
            if track {
                sig.mix(u64::MAX);
            }
            continue;
        };
        let tc = bilinear_taps(w, hgt, m.x, m.y, BorderMode::Clamp);
        let ta = bilinear_taps(w, hgt, m.x, m.y, BorderMode::Zero);
        sample_with_taps(color, &tc, &mut colors[p * 3..p * 3 + 3]);
        sample_with_taps(alpha, &ta, &mut alphas[p..p + 1]);
        if track {
            sig.taps(&tc);
            sig.taps(&ta);
        }
    }
    LayerWarp {
        h,
        dh,
        colors,
        alphas,
        signature: sig.0,
    }
}

/// Adjoint of [`warp_layer`]: scatters upstream gradients into the source
/// layers and returns the derivative with respect to sigma.
fn warp_layer_backward(
    color: &ImageGrid,
    alpha: &ImageGrid,
    warp: &LayerWarp,
    d_color_out: &[f64],
    d_alpha_out: &[f64],
    d_color_src: &mut ImageGrid,
    d_alpha_src: &mut ImageGrid,
) -> f64 {
    let (w, hgt) = (color.width(), color.height());
    let (cs, as_) = (color.as_slice(), alpha.as_slice());
    let mut d_sigma = 0.0;
    let (mut x, mut y) = (0usize, 0usize);
    for p in 0..w * hgt {
        let (u, v) = (x as f64, y as f64);
        x += 1;
        if x == w {
            (x, y) = (0, y + 1);
        }
        let gc = &d_color_out[p * 3..p * 3 + 3];
        let ga = d_alpha_out[p];
        if ga == 0.0 && gc.iter().all(|&g| g == 0.0) {
            continue;
        }
        let Some(m) = map_point(&warp.h, u, v) else {
            continue;
        };
        let (du, dv) = m.derivative(&warp.dh, u, v);
        let tc = bilinear_taps(w, hgt, m.x, m.y, BorderMode::Clamp);
        let ta = bilinear_taps(w, hgt, m.x, m.y, BorderMode::Zero);
        let dc = d_color_src.as_mut_slice();
        for k in 0..tc.len {
            let q = tc.pixels[k];
            let spatial = tc.d_dx[k] * du + tc.d_dy[k] * dv;
            for c in 0..3 {
                dc[q * 3 + c] += tc.weights[k] * gc[c];
                d_sigma += gc[c] * spatial * cs[q * 3 + c];
            }
        }
        let da = d_alpha_src.as_mut_slice();
        for k in 0..ta.len {
            let q = ta.pixels[k];
            da[q] += ta.weights[k] * ga;
            d_sigma += ga * (ta.d_dx[k] * du + ta.d_dy[k] * dv) * as_[q];
        }
    }
    d_sigma
}

struct TargetPass {
    layers: Vec<LayerWarp>,
    /// Running composite after each layer, back to front.
    prefix: Vec<Vec<f64>>,
    rendered: ImageGrid,
}

fn render_target(
    mat: &Materialized,
    params: &MpiParams,
    camera: &Camera,
    sigma: f64,
    track: bool,
    parallelism: Parallelism,
) -> Result<TargetPass> {
    let d = params.planes.len();
    let homographies = params
        .planes
        .depths()
        .iter()
        .map(|&depth| plane_homography_parts(&params.reference, camera, depth, sigma))
        .collect::<Result<Vec<_>>>()?;
    let one = |i: usize| {
        let (h, dh) = homographies[i];
        warp_layer(&mat.colors[i], &mat.alphas[i], h, dh, track)
    };
    let layers: Vec<LayerWarp> = match parallelism {
        Parallelism::Serial => (0..d).map(one).collect(),
        Parallelism::Parallel => (0..d).into_par_iter().map(one).collect(),
    };
    let n = params.width() * params.height();
    let mut acc = vec![0.0; n * 3];
    let mut prefix = Vec::with_capacity(d);
    for layer in &layers {
        for ((o, cp), &ap) in acc
            .chunks_exact_mut(3)
            .zip(layer.colors.chunks_exact(3))
            .zip(&layer.alphas)
        {
            for (ov, cv) in o.iter_mut().zip(cp) {
                *ov = cv * ap + (1.0 - ap) * *ov;
            }
        }
        prefix.push(acc.clone());
    }
    let rendered = ImageGrid::from_vec(params.width(), params.height(), 3, acc)?;
    Ok(TargetPass {
        layers,
        prefix,
        rendered,
    })
}

/// Upstream gradient of the pixel loss with respect to the rendered image.
fn pixel_loss_grad(
    rendered: &ImageGrid,
    target: &ImageGrid,
    config: &LossConfig,
    scale: f64,
    sig: Option<&mut Signature>,
) -> (f64, ImageGrid) {
    let n = rendered.pixel_count() as f64;
    let mut grad = rendered.zeros_like();
    let mut loss = 0.0;
    let mut local = Signature::new();
    for ((g, r), t) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(rendered.as_slice())
        .zip(target.as_slice())
    {
        let diff = r - t;
        loss += diff.abs();
        *g = scale * sign(diff) / n;
        local.sign(diff);
    }
    loss /= n;
    let gamma = config.gradient_term_weight;
    if gamma != 0.0 {
        let (rx, ry) = sobel(rendered);
        let (tx, ty) = sobel(target);
        let mut gx = rendered.zeros_like();
        let mut gy = rendered.zeros_like();
        let mut grad_loss = 0.0;
        for (out, (a, b)) in [(&mut gx, (&rx, &tx)), (&mut gy, (&ry, &ty))] {
            for ((o, x), y) in out.as_mut_slice().iter_mut().zip(a.as_slice()).zip(b.as_slice()) {
                let diff = x - y;
                grad_loss += diff.abs();
                *o = scale * gamma * sign(diff) / n;
                local.sign(diff);
            }
        }
        loss += gamma * grad_loss / n;
        sobel_adjoint(&gx, &gy, &mut grad);
    }
    if let Some(s) = sig {
        s.mix(local.0);
    }
    (loss, grad)
}

struct Pass {
    evaluation: Evaluation,
    gradients: Option<GradientSet>,
    signature: u64,
}

fn evaluate(
    params: &MpiParams,
    problem: &Problem,
    config: &LossConfig,
    want_gradients: bool,
    track: bool,
    parallelism: Parallelism,
) -> Result<Pass> {
    config.validate()?;
    let mat = materialize_parts(params, &problem.source_image)?;
    let n_px = params.width() * params.height();
    let n = n_px as f64;
    let d = params.planes.len();
    let mut sig = Signature::new();

    // scale
    let estimated = matches!(problem.sigma_mode, SigmaMode::Estimated);
    let samples = if problem.points.is_empty() {
        Vec::new()
    } else {
        sample_disparities(&mat.disparity, &problem.points)?
    };
    let ln_sigma = match problem.sigma_mode {
        SigmaMode::Estimated => log_scale(&samples, &problem.points),
        SigmaMode::Fixed(s) => s.ln(),
    };
    let sigma = ln_sigma.exp();

    // sparse depth term; gradients with respect to ln(sample) and ln(sigma)
    let count = samples.len() as f64;
    let mut d_ln_samples = vec![0.0; samples.len()];
    let mut d_ln_sigma = 0.0;
    let mut depth = 0.0;
    for ((s, p), g) in samples.iter().zip(problem.points.points()).zip(&mut d_ln_samples) {
        let r = s.ln() - ln_sigma + p.depth.ln();
        depth += r * r;
        *g = config.lambda_d * 2.0 * r / count;
        d_ln_sigma -= config.lambda_d * 2.0 * r / count;
    }
    if !samples.is_empty() {
        depth /= count;
    }

    // smoothness term
    let edges = edge_mask(&problem.source_image, config.e_min)?;
    let (gx, gy) = sobel(&mat.disparity);
    let mut d_gx = gx.zeros_like();
    let mut d_gy = gy.zeros_like();
    let mut smooth = 0.0;
    for p in 0..n_px {
        let (x, y) = (gx.as_slice()[p], gy.as_slice()[p]);
        let excess = x.abs() + y.abs() - config.g_min;
        let keep = 1.0 - edges.as_slice()[p];
        if excess > 0.0 {
            smooth += excess * keep;
            let g = config.lambda_s * keep / n;
            d_gx.as_mut_slice()[p] = g * sign(x);
            d_gy.as_mut_slice()[p] = g * sign(y);
        }
        if track {
            sig.sign(excess);
            sig.sign(x);
            sig.sign(y);
        }
    }
    smooth /= n;

    // view synthesis over all targets
    let k = problem.targets.len() as f64;
    let mut pixel = 0.0;
    let mut d_colors: Vec<ImageGrid> = mat.colors.iter().map(ImageGrid::zeros_like).collect();
    let mut d_alphas: Vec<ImageGrid> = mat.alphas.iter().map(ImageGrid::zeros_like).collect();
    let mut d_sigma_render = 0.0;
    for (camera, target) in &problem.targets {
        let pass = render_target(&mat, params, camera, sigma, track, parallelism)?;
        if track {
            pass.layers.iter().for_each(|l| sig.mix(l.signature));
        }
        let (loss, d_rendered) = pixel_loss_grad(
            &pass.rendered,
            target,
            config,
            config.lambda_p / k,
            track.then_some(&mut sig),
        );
        pixel += loss / k;
        if !want_gradients {
            continue;
        }

        // composite adjoint, front to back
        let mut g_out = d_rendered.into_vec();
        let mut d_warped_c: Vec<Vec<f64>> = vec![Vec::new(); d];
        let mut d_warped_a: Vec<Vec<f64>> = vec![Vec::new(); d];
        for i in (0..d).rev() {
            let layer = &pass.layers[i];
            let mut gc = vec![0.0; n_px * 3];
            let mut ga = vec![0.0; n_px];
            for p in 0..n_px {
                let a = layer.alphas[p];
                let mut acc = 0.0;
                for c in 0..3 {
                    let prev = if i == 0 { 0.0 } else { pass.prefix[i - 1][p * 3 + c] };
                    let g = g_out[p * 3 + c];
                    gc[p * 3 + c] = g * a;
                    acc += g * (layer.colors[p * 3 + c] - prev);
                    g_out[p * 3 + c] = g * (1.0 - a);
                }
                ga[p] = acc;
            }
            d_warped_c[i] = gc;
            d_warped_a[i] = ga;
        }

        // warp adjoints, one independent job per layer
        let job = |i: usize| {
            let mut dc = mat.colors[i].zeros_like();
            let mut da = mat.alphas[i].zeros_like();
            let ds = warp_layer_backward(
                &mat.colors[i],
                &mat.alphas[i],
                &pass.layers[i],
                &d_warped_c[i],
                &d_warped_a[i],
                &mut dc,
                &mut da,
            );
            (dc, da, ds)
        };
        let per_layer: Vec<(ImageGrid, ImageGrid, f64)> = match parallelism {
            Parallelism::Serial => (0..d).map(job).collect(),
            Parallelism::Parallel => (0..d).into_par_iter().map(job).collect(),
        };
        for (i, (dc, da, ds)) in per_layer.into_iter().enumerate() {
            add_assign(&mut d_colors[i], &dc);
            add_assign(&mut d_alphas[i], &da);
            d_sigma_render += ds;
        }
    }

    let loss = LossBreakdown::combine(pixel, smooth, depth, config);
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let evaluation = Evaluation { loss, sigma };
    if !want_gradients {
        return Ok(Pass {
            evaluation,
            gradients: None,
            signature: sig.0,
        });
    }

    // disparity gradient: smoothness plus the point samples (through sigma)
    let mut d_disp = mat.disparity.zeros_like();
    sobel_adjoint(&d_gx, &d_gy, &mut d_disp);
    if !samples.is_empty() {
        if estimated {
            let total_ln_sigma = d_ln_sigma + sigma * d_sigma_render;
            d_ln_samples.iter_mut().for_each(|g| *g += total_ln_sigma / count);
        }
        for ((g, s), p) in d_ln_samples.iter().zip(&samples).zip(problem.points.points()) {
            let taps = bilinear_taps(params.width(), params.height(), p.x, p.y, BorderMode::Clamp);
            for (q, w) in taps.iter() {
                d_disp.as_mut_slice()[q] += w * g / s;
            }
        }
    }

    // disparity -> alphas, weights
    let mut d_weights: Vec<ImageGrid> = mat.weights.iter().map(ImageGrid::zeros_like).collect();
    for (i, depth) in params.planes.depths().iter().enumerate() {
        let inv = 1.0 / depth;
        for p in 0..n_px {
            let g = d_disp.as_slice()[p] * inv;
            d_alphas[i].as_mut_slice()[p] += g * mat.weights[i].as_slice()[p];
            d_weights[i].as_mut_slice()[p] += g * mat.alphas[i].as_slice()[p];
        }
    }

    // layer colors -> weights, background
    let mut d_background = mat.background.zeros_like();
    let src = problem.source_image.as_slice();
    let bg = mat.background.as_slice();
    for i in 0..d {
        let dc = d_colors[i].as_slice();
        let w = mat.weights[i].as_slice();
        for (p, &wp) in w.iter().enumerate().take(n_px) {
            let mut acc = 0.0;
            for c in 0..3 {
                let q = p * 3 + c;
                acc += dc[q] * (src[q] - bg[q]);
                d_background.as_mut_slice()[q] += dc[q] * (1.0 - wp);
            }
            d_weights[i].as_mut_slice()[p] += acc;
        }
    }

    // weights -> alphas: w_i = w_{i+1} (1 - a_{i+1})
    for i in 0..d - 1 {
        for p in 0..n_px {
            let g = d_weights[i].as_slice()[p];
            let a_next = mat.alphas[i + 1].as_slice()[p];
            let w_next = mat.weights[i + 1].as_slice()[p];
            d_weights[i + 1].as_mut_slice()[p] += g * (1.0 - a_next);
            d_alphas[i + 1].as_mut_slice()[p] -= g * w_next;
        }
    }

    // squashing nonlinearities
    let d_alpha_logits = (1..d)
        .map(|i| {
            let a = &mat.alphas[i];
            let data = d_alphas[i]
                .as_slice()
                .iter()
                .zip(a.as_slice())
                .map(|(g, a)| g * a * (1.0 - a))
                .collect();
            ImageGrid::from_vec(a.width(), a.height(), 1, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let beta = params.bg_blend;
    let d_bg_logits = ImageGrid::from_vec(
        params.width(),
        params.height(),
        3,
        d_background
            .as_slice()
            .iter()
            .zip(mat.bg_sigmoid.as_slice())
            .map(|(g, s)| g * beta * s * (1.0 - s))
            .collect(),
    )?;
    let gradients = GradientSet {
        d_alpha_logits,
        d_bg_logits,
    };
    if !gradients.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(Pass {
        evaluation,
        gradients: Some(gradients),
        signature: sig.0,
    })
}

fn add_assign(dst: &mut ImageGrid, src: &ImageGrid) {
    dst.as_mut_slice()
        .iter_mut()
        .zip(src.as_slice())
        .for_each(|(a, b)| *a += b);
}

/// Objective value without gradients.
pub fn evaluate_loss(
    params: &MpiParams,
    problem: &Problem,
    config: &LossConfig,
    parallelism: Parallelism,
) -> Result<Evaluation> {
    Ok(evaluate(params, problem, config, false, false, parallelism)?.evaluation)
}

/// Objective value and its exact gradient with respect to every logit.
pub fn loss_and_gradients(
    params: &MpiParams,
    problem: &Problem,
    config: &LossConfig,
    parallelism: Parallelism,
) -> Result<(Evaluation, GradientSet)> {
    let pass = evaluate(params, problem, config, true, false, parallelism)?;
    Ok((pass.evaluation, pass.gradients.expect("requested gradients")))
}

/// Position of one scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coordinate {
    /// `(layer, x, y)` of an alpha logit; `layer` is the plane index (>= 1).
    Alpha { layer: usize, x: usize, y: usize },
    /// `(x, y, channel)` of a background logit.
    Background { x: usize, y: usize, channel: usize },
}

impl Coordinate {
    fn from_flat(params: &MpiParams, mut index: usize) -> Coordinate {
        let w = params.width();
        let n = params.width() * params.height();
        for layer in 0..params.alpha_logits.len() {
            if index < n {
                return Coordinate::Alpha {
                    layer: layer + 1,
                    x: index % w,
                    y: index / w,
                };
            }
            index -= n;
        }
        let (p, channel) = (index / 3, index % 3);
        Coordinate::Background {
            x: p % w,
            y: p / w,
            channel,
        }
    }
}

/// Entrywise comparison of analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates whose difference stencil straddles a non-smooth point.
    pub flagged: usize,
    /// Unflagged coordinates with relative error above the tolerance.
    pub failed: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub worst: Option<(Coordinate, f64, f64)>,
    pub tolerance: f64,
}

impl FdReport {
    /// Fraction of unflagged coordinates within tolerance.
    pub fn pass_fraction(&self) -> f64 {
        let considered = self.checked - self.flagged;
        if considered == 0 {
            1.0
        } else {
            (considered - self.failed) as f64 / considered as f64
        }
    }
}

/// Absolute floor on the relative-error denominator; differences below
/// this are dominated by rounding in the difference quotient.
pub const FD_ABSOLUTE_FLOOR: f64 = 1e-6;

/// Relative error `|a - f| / max(|a|, |f|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(FD_ABSOLUTE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Checks every gradient entry against `(L(x + h) - L(x - h)) / 2h`.
pub fn finite_diff_check(
    params: &MpiParams,
    problem: &Problem,
    config: &LossConfig,
    h: f64,
    tolerance: f64,
) -> Result<FdReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step must be positive, got {h}")));
    }
    let base = evaluate(params, problem, config, true, true, Parallelism::Serial)?;
    let analytic = base.gradients.expect("requested gradients").flatten();
    let total = params.len();
    let results: Vec<(f64, f64, bool)> = (0..total)
        .into_par_iter()
        .map(|index| -> Result<(f64, f64, bool)> {
            let mut p = params.clone();
            let x = params.get_flat(index);
            p.set_flat(index, x + h);
            let plus = evaluate(&p, problem, config, false, true, Parallelism::Serial)?;
            p.set_flat(index, x - h);
            let minus = evaluate(&p, problem, config, false, true, Parallelism::Serial)?;
            let numeric = (plus.evaluation.loss.total - minus.evaluation.loss.total) / (2.0 * h);
            let kink = plus.signature != base.signature || minus.signature != base.signature;
            Ok((analytic[index], numeric, kink))
        })
        .collect::<Result<_>>()?;

    let mut report = FdReport {
        checked: total,
        flagged: 0,
        failed: 0,
        max_rel_error: 0.0,
        mean_rel_error: 0.0,
        worst: None,
        tolerance,
    };
    let mut sum = 0.0;
    for (index, &(a, f, kink)) in results.iter().enumerate() {
        if kink {
            report.flagged += 1;
            continue;
        }
        let rel = relative_error(a, f);
        sum += rel;
        if rel > tolerance {
            report.failed += 1;
        }
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some((Coordinate::from_flat(params, index), a, f));
        }
    }
    let considered = total - report.flagged;
    if considered > 0 {
        report.mean_rel_error = sum / considered as f64;
    }
    Ok(report)
}
