//! Per-scene MPI fitting with Adam.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::grad::{loss_and_gradients, logit, GradientSet, MpiParams, Problem, SigmaMode};
use crate::grid::ImageGrid;
use crate::loss::{LossBreakdown, LossConfig};
use crate::planes::{PlaneDepths, SparsePointSet, DEFAULT_FAR, DEFAULT_NEAR};
use crate::Parallelism;

/// One posed image with its (possibly empty) sparse points.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub camera: Camera,
    pub image: ImageGrid,
    pub points: SparsePointSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Steps over which the background image ramps in from the source image.
    pub s_bg: usize,
    pub planes: usize,
    pub d_near: f64,
    pub d_far: f64,
    pub loss: LossConfig,
    pub seed: u64,
    /// Align sigma to the source points each step; otherwise sigma = 1.
    pub use_scale: bool,
    /// Snapshot period in steps; 0 disables snapshots.
    pub snapshot_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            s_bg: 1000,
            planes: 32,
            d_near: DEFAULT_NEAR,
            d_far: DEFAULT_FAR,
            loss: LossConfig::default(),
            seed: 0,
            use_scale: true,
            snapshot_every: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.s_bg < 1 {
            return Err(Error::InvalidConfig("s_bg must be at least 1".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::InvalidConfig("adam_epsilon must be positive".into()));
        }
        PlaneDepths::new(self.d_near, self.d_far, self.planes)?;
        self.loss.validate()
    }

    /// Background blend for a 0-based step: `min(step / s_bg, 1)`.
    pub fn background_blend(&self, step: usize) -> f64 {
        (step as f64 / self.s_bg as f64).min(1.0)
    }
}

/// Loss history and summary of a fitting run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub history: Vec<LossBreakdown>,
    pub sigma_history: Vec<f64>,
    pub final_sigma: f64,
    pub steps: usize,
    pub wall_time_secs: f64,
}

impl FitReport {
    /// Equality ignoring wall time.
    pub fn same_trajectory(&self, other: &FitReport) -> bool {
        self.history == other.history
            && self.sigma_history == other.sigma_history
            && self.final_sigma.to_bits() == other.final_sigma.to_bits()
            && self.steps == other.steps
    }
}

/// Harmonic initialization: layer `i` (1-based) starts with alpha `1/i`, so
/// every layer has compositing weight `1/D`; the background starts at the
/// source image.
pub fn init_params(
    width: usize,
    height: usize,
    config: &FitConfig,
    reference: &Camera,
    source_image: &ImageGrid,
) -> Result<MpiParams> {
    if source_image.width() != width || source_image.height() != height || source_image.channels() != 3 {
        return Err(Error::mismatch(
            "source image",
            format!("{width}x{height}x3"),
            source_image.shape_string(),
        ));
    }
    let planes = PlaneDepths::new(config.d_near, config.d_far, config.planes)?;
    let alpha_logits = (2..=config.planes)
        .map(|i| ImageGrid::filled(width, height, 1, logit(1.0 / i as f64)))
        .collect::<Result<Vec<_>>>()?;
    let bg_logits = source_image.map(|v| logit(v.clamp(1e-4, 1.0 - 1e-4)));
    Ok(MpiParams {
        alpha_logits,
        bg_logits,
        planes,
        reference: reference.clone(),
        bg_blend: 0.0,
    })
}

/// First and second moment estimates, one entry per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Bias-corrected Adam update of every logit; `step_index` starts at 1.
pub fn adam_step(
    params: &mut MpiParams,
    grads: &GradientSet,
    state: &mut AdamState,
    step_index: usize,
    config: &FitConfig,
) -> Result<()> {
    if step_index < 1 {
        return Err(Error::InvalidConfig("adam step index starts at 1".into()));
    }
    if state.m.len() != params.len() {
        return Err(Error::mismatch("adam state", params.len(), state.m.len()));
    }
    let t = step_index as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let grads_flat = grads.slices().flat_map(|s| s.iter().copied());
    let values = params.slices_mut().flat_map(|s| s.iter_mut());
    for (((p, g), m), v) in values
        .zip(grads_flat)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let update = config.learning_rate * (*m / c1) / ((*v / c2).sqrt() + config.adam_epsilon);
        if !update.is_finite() {
            return Err(Error::NonFinite(format!("adam update at step {step_index}")));
        }
        *p -= update;
    }
    Ok(())
}

/// Fits an MPI referenced at `frames[source_index]` to the other frames.
pub fn fit_mpi(
    frames: &[Frame],
    source_index: usize,
    config: &FitConfig,
    parallelism: Parallelism,
) -> Result<(MpiParams, FitReport)> {
    fit_mpi_with(frames, source_index, config, parallelism, |_, _| Ok(()))
}

/// As [`fit_mpi`], calling `on_snapshot(step, params)` every
/// `config.snapshot_every` steps.
pub fn fit_mpi_with(
    frames: &[Frame],
    source_index: usize,
    config: &FitConfig,
    parallelism: Parallelism,
    mut on_snapshot: impl FnMut(usize, &MpiParams) -> Result<()>,
) -> Result<(MpiParams, FitReport)> {
    config.validate()?;
    if frames.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "fitting needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let source = frames.get(source_index).ok_or_else(|| {
        Error::InvalidConfig(format!("source index {source_index} out of range"))
    })?;
    let sigma_mode = if config.use_scale {
        SigmaMode::Estimated
    } else {
        SigmaMode::Fixed(1.0)
    };
    let mut targets: Vec<usize> = (0..frames.len()).filter(|&i| i != source_index).collect();
    targets.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let problems = targets
        .iter()
        .map(|&i| {
            Problem::new(
                source.image.clone(),
                vec![(frames[i].camera.clone(), frames[i].image.clone())],
                source.points.clone(),
                sigma_mode,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let (w, h) = (source.image.width(), source.image.height());
    let mut params = init_params(w, h, config, &source.camera, &source.image)?;
    let mut state = AdamState::new(params.len());
    let mut history = Vec::with_capacity(config.steps);
    let mut sigma_history = Vec::with_capacity(config.steps);
    let start = Instant::now();
    for step in 0..config.steps {
        params.bg_blend = config.background_blend(step);
        let problem = &problems[step % problems.len()];
        let (eval, grads) = loss_and_gradients(&params, problem, &config.loss, parallelism)
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
                other => other,
            })?;
        history.push(eval.loss);
        sigma_history.push(eval.sigma);
        adam_step(&mut params, &grads, &mut state, step + 1, config)?;
        if config.snapshot_every > 0 && (step + 1) % config.snapshot_every == 0 {
            on_snapshot(step + 1, &params)?;
        }
        if step % 100 == 0 {
            log::debug!("step {step}: loss {:.6} sigma {:.4}", eval.loss.total, eval.sigma);
        }
    }
    let report = FitReport {
        final_sigma: *sigma_history.last().expect("at least one step"),
        history,
        sigma_history,
        steps: config.steps,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::materialize;
    use crate::render::{compositing_weights, disparity_map};

    fn cam(w: usize) -> Camera {
        Camera::identity_pose(w as f64, w as f64, w as f64 / 2.0, w as f64 / 2.0).unwrap()
    }

    #[test]
    fn harmonic_init_alphas_and_uniform_weights() {
        let config = FitConfig { planes: 4, ..Default::default() };
        let src = ImageGrid::filled(5, 5, 3, 0.3).unwrap();
        let params = init_params(5, 5, &config, &cam(5), &src).unwrap();
        let mpi = materialize(&params, &src).unwrap();
        for (i, a) in mpi.alphas().iter().enumerate() {
            assert!((a.get(2, 2, 0) - 1.0 / (i + 1) as f64).abs() < 1e-14);
        }
        for w in compositing_weights(mpi.alphas()) {
            assert!(w.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-14));
        }
        let expected: f64 = mpi.planes().disparities().iter().sum::<f64>() / 4.0;
        assert!(disparity_map(&mpi).as_slice().iter().all(|v| (v - expected).abs() < 1e-14));
        assert_eq!(params.bg_blend, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(FitConfig { s_bg: 0, ..Default::default() }.validate().is_err());
        assert!(FitConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(FitConfig { planes: 1, ..Default::default() }.validate().is_err());
        assert!(FitConfig::default().validate().is_ok());
    }

    #[test]
    fn background_ramp() {
        let config = FitConfig { s_bg: 4, ..Default::default() };
        let betas: Vec<f64> = (0..7).map(|s| config.background_blend(s)).collect();
        assert_eq!(betas, vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    fn quadratic_params() -> MpiParams {
        let planes = PlaneDepths::new(1.0, 2.0, 2).unwrap();
        MpiParams {
            alpha_logits: vec![ImageGrid::from_vec(2, 1, 1, vec![1.5, -0.7]).unwrap()],
            bg_logits: ImageGrid::new(2, 1, 3).unwrap(),
            planes,
            reference: cam(2),
            bg_blend: 0.0,
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = quadratic_params();
        let before = params.clone();
        let grads = GradientSet::zeros_like(&params);
        let mut state = AdamState::new(params.len());
        adam_step(&mut params, &grads, &mut state, 1, &FitConfig::default()).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = quadratic_params();
        let mut grads = GradientSet::zeros_like(&params);
        grads.d_alpha_logits[0] = ImageGrid::from_vec(2, 1, 1, vec![0.3, -2.0]).unwrap();
        let mut state = AdamState::new(params.len());
        let config = FitConfig::default();
        adam_step(&mut params, &grads, &mut state, 1, &config).unwrap();
        let moved = params.alpha_logits[0].as_slice();
        assert!((moved[0] - (1.5 - 1e-4)).abs() < 1e-10);
        assert!((moved[1] - (-0.7 + 1e-4)).abs() < 1e-10);
    }

    #[test]
    fn adam_matches_scripted_trace() {
        // f(x, y) = (x - 3)^2 + 10 (y + 1)^2, independent textbook recurrence
        let config = FitConfig { learning_rate: 0.05, ..Default::default() };
        let mut params = quadratic_params();
        params.alpha_logits[0] = ImageGrid::from_vec(2, 1, 1, vec![0.5, 0.5]).unwrap();
        let mut state = AdamState::new(params.len());
        let (mut x, mut m, mut v) = ([0.5f64, 0.5], [0.0f64; 2], [0.0f64; 2]);
        for t in 1..=100 {
            let p = params.alpha_logits[0].as_slice().to_vec();
            let g = [2.0 * (p[0] - 3.0), 20.0 * (p[1] + 1.0)];
            let mut grads = GradientSet::zeros_like(&params);
            grads.d_alpha_logits[0] = ImageGrid::from_vec(2, 1, 1, g.to_vec()).unwrap();
            adam_step(&mut params, &grads, &mut state, t, &config).unwrap();

            let gr = [2.0 * (x[0] - 3.0), 20.0 * (x[1] + 1.0)];
            for k in 0..2 {
                m[k] = 0.9 * m[k] + 0.1 * gr[k];
                v[k] = 0.999 * v[k] + 0.001 * gr[k] * gr[k];
                let mh = m[k] / (1.0 - 0.9f64.powi(t as i32));
                let vh = v[k] / (1.0 - 0.999f64.powi(t as i32));
                x[k] -= 0.05 * mh / (vh.sqrt() + 1e-8);
            }
        }
        let p = params.alpha_logits[0].as_slice();
        assert!((p[0] - x[0]).abs() < 1e-10 && (p[1] - x[1]).abs() < 1e-10);
    }
}
