//! First-order optimization: Adam over flat vectors and over a scene's
//! per-Gaussian parameter groups, and photometric relative-pose estimation.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Image;
use crate::geometry::{Intrinsics, Pose, Quaternion};
use crate::losses::{rgb_loss, SsimParams};
use crate::raster::{render, render_backward, ParamGrads};
use crate::scene::{transform_scene, GaussianScene, PARAMS_PER_GAUSSIAN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr_position: f64,
    pub lr_color: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_pose_rotation: f64,
    pub lr_pose_translation: f64,
    /// Pose learning rates are multiplied by this every `pose_decay_every` iterations.
    pub pose_decay: f64,
    pub pose_decay_every: usize,
    pub pose_iterations: usize,
    /// Extrapolate the previous relative motion instead of starting at identity.
    pub constant_velocity: bool,
    /// Pixels whose rendered coverage is below this are left out of the pose
    /// objective (0 disables the mask).
    pub pose_coverage_min: f64,
    /// Rotation steps pivot about the local scene's median depth on the
    /// optical axis instead of the camera center.
    pub pose_pivot: bool,
    /// Keep optimizing the newest pose during global refinement, driven by the
    /// rendering and projection terms of its frame.
    pub refine_pose: bool,
    /// The refinement pose learning rates decay geometrically from the pose
    /// rates to this fraction of them over one frame's iterations.
    pub refine_pose_lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Photometric iterations of the single-view initialization.
    pub init_iterations: usize,
    /// Global refinement iterations after each new frame.
    pub iterations_per_frame: usize,
    /// Pose estimation stops once the best loss improved by less than this
    /// over the last `pose_patience` iterations (0 disables).
    pub convergence_tol: f64,
    pub pose_patience: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_position: 1.6e-4,
            lr_color: 2.5e-3,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_pose_rotation: 1e-3,
            lr_pose_translation: 2e-3,
            pose_decay: 0.95,
            pose_decay_every: 50,
            pose_iterations: 200,
            constant_velocity: false,
            pose_coverage_min: 0.8,
            pose_pivot: false,
            refine_pose: false,
            refine_pose_lr_end: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            init_iterations: 300,
            iterations_per_frame: 120,
            convergence_tol: 0.0,
            pose_patience: 30,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [
            self.lr_position,
            self.lr_color,
            self.lr_rotation,
            self.lr_scale,
            self.lr_opacity,
            self.lr_pose_rotation,
            self.lr_pose_translation,
        ];
        if lrs.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if !(self.pose_decay > 0.0) || self.pose_decay_every == 0 {
            return Err(Error::Config("pose decay must be positive with a non-zero interval".into()));
        }
        if self.pose_iterations == 0 || self.iterations_per_frame == 0 {
            return Err(Error::Config("iteration counts must be positive".into()));
        }
        if !(self.refine_pose_lr_end > 0.0 && self.refine_pose_lr_end <= 1.0) {
            return Err(Error::Config("refine_pose_lr_end must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.pose_coverage_min) || !(self.convergence_tol >= 0.0) {
            return Err(Error::Config("pose_coverage_min must lie in [0, 1], convergence_tol >= 0".into()));
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        OptimizerConfig::default().hyper()
    }
}

/// Moments for a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            first: vec![0.0; n],
            second: vec![0.0; n],
            step: 0,
        }
    }
}

#[inline]
fn adam_delta(m: &mut f64, v: &mut f64, g: f64, lr: f64, hp: &AdamHyper, bc1: f64, bc2: f64) -> f64 {
    *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
    *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    -lr * m_hat / (v_hat.sqrt() + hp.eps)
}

/// One bias-corrected Adam update; returns the step to add to the parameters.
/// `lr` holds one learning rate per coordinate.
pub fn adam_update(state: &mut AdamState, grads: &[f64], lr: &[f64], hp: &AdamHyper) -> Result<Vec<f64>> {
    if grads.len() != state.first.len() || lr.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} gradients and learning rates", state.first.len()),
            found: format!("{} / {}", grads.len(), lr.len()),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    state.step += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.step as i32);
    Ok((0..grads.len())
        .map(|i| adam_delta(&mut state.first[i], &mut state.second[i], grads[i], lr[i], hp, bc1, bc2))
        .collect())
}

/// Adam step on a flat vector: `params += adam_update(..)`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: &[f64], hp: &AdamHyper) -> Result<()> {
    let delta = adam_update(state, grads, lr, hp)?;
    for (p, d) in params.iter_mut().zip(delta) {
        *p += d;
    }
    Ok(())
}

/// Which scene parameter groups an Adam step may change.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneLearningRates {
    pub position: f64,
    pub color: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
}

impl SceneLearningRates {
    pub fn from_config(cfg: &OptimizerConfig) -> Self {
        Self {
            position: cfg.lr_position,
            color: cfg.lr_color,
            rotation: cfg.lr_rotation,
            scale: cfg.lr_scale,
            opacity: cfg.lr_opacity,
        }
    }

    pub fn frozen_positions(mut self) -> Self {
        self.position = 0.0;
        self
    }
}

/// Adam step on every Gaussian parameter using the moments stored in the
/// scene. Quaternions are renormalized and colors clamped to `[0, 1]` after
/// the update. A zero learning rate freezes its group.
pub fn scene_adam_step(scene: &mut GaussianScene, grads: &ParamGrads, lr: &SceneLearningRates, hp: &AdamHyper) -> Result<()> {
    if grads.len() != scene.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} gaussians", scene.len()),
            found: grads.len().to_string(),
        });
    }
    if !grads.all_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let mom = &mut scene.moments;
    mom.step += 1;
    let bc1 = 1.0 - hp.beta1.powi(mom.step.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - hp.beta2.powi(mom.step.min(i32::MAX as u64) as i32);
    let mut rates = [0.0; PARAMS_PER_GAUSSIAN];
    rates[0..3].fill(lr.position);
    rates[3..6].fill(lr.color);
    rates[6..10].fill(lr.rotation);
    rates[10..13].fill(lr.scale);
    rates[13] = lr.opacity;

    for i in 0..scene.positions.len() {
        let mut g = [0.0; PARAMS_PER_GAUSSIAN];
        g[0..3].copy_from_slice(&grads.d_positions[i]);
        g[3..6].copy_from_slice(&grads.d_colors[i]);
        g[6..10].copy_from_slice(&grads.d_rotations[i]);
        g[10..13].copy_from_slice(&grads.d_log_scales[i]);
        g[13] = grads.d_logit_opacities[i];
        let (m, v) = (&mut mom.first[i], &mut mom.second[i]);
        let mut d = [0.0; PARAMS_PER_GAUSSIAN];
        for c in 0..PARAMS_PER_GAUSSIAN {
            if rates[c] > 0.0 {
                d[c] = adam_delta(&mut m[c], &mut v[c], g[c], rates[c], hp, bc1, bc2);
            }
        }
        for c in 0..3 {
            scene.positions[i][c] += d[c];
            scene.colors[i][c] = (scene.colors[i][c] + d[3 + c]).clamp(0.0, 1.0);
            scene.log_scales[i][c] += d[10 + c];
        }
        let q = &mut scene.rotations[i];
        for c in 0..4 {
            q[c] += d[6 + c];
        }
        *q = Quaternion::from_array(*q).normalized().to_array();
        scene.logit_opacities[i] += d[13];
    }
    Ok(())
}

/// Photometric loss of a render against a target and the scene/pose gradients.
pub struct PhotometricEval {
    pub loss: f64,
    pub grads: ParamGrads,
    pub coverage: Vec<f64>,
}

/// Renders `scene` at `pose`, evaluates the photometric loss against `target`
/// and backpropagates. Pixels whose coverage is below `coverage_min` take the
/// rendered value as target, which removes them from the loss.
pub fn photometric_eval(
    scene: &GaussianScene,
    pose: &Pose,
    k: &Intrinsics,
    target: &Image,
    lambda_dssim: f64,
    ssim: &SsimParams,
    coverage_min: f64,
) -> Result<PhotometricEval> {
    let out = render(scene, pose, k);
    let masked;
    let target = if coverage_min > 0.0 {
        let mut t = target.clone();
        for (i, a) in out.alpha.iter().enumerate() {
            if *a < coverage_min {
                t.data[3 * i..3 * i + 3].copy_from_slice(&out.color.data[3 * i..3 * i + 3]);
            }
        }
        masked = t;
        &masked
    } else {
        target
    };
    let (loss, d_color) = rgb_loss(&out.color, target, lambda_dssim, ssim)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss("rgb"));
    }
    let zero_depth = vec![0.0; k.num_pixels()];
    let grads = render_backward(scene, pose, k, &out, &d_color, &zero_depth)?;
    Ok(PhotometricEval {
        loss,
        grads,
        coverage: out.alpha,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEstimate {
    /// Best relative transform found.
    pub pose: Pose,
    pub loss: f64,
    pub initial_loss: f64,
    pub iterations: usize,
}

/// Estimates the rigid transform `A` that makes the frozen `local` scene,
/// transformed by `A` and rendered from the identity camera, match `target`.
///
/// Adam runs on the left tangent of `A`; the returned pose has the lowest
/// loss seen. Fails with `DivergedPose` once the loss has stayed above ten
/// times its initial value for 50 consecutive iterations.
pub fn estimate_relative_pose(
    local: &GaussianScene,
    target: &Image,
    k: &Intrinsics,
    init: &Pose,
    cfg: &OptimizerConfig,
    lambda_dssim: f64,
    ssim: &SsimParams,
) -> Result<PoseEstimate> {
    if local.is_empty() {
        return Err(Error::Config("pose estimation needs a non-empty local scene".into()));
    }
    let hp = cfg.hyper();
    let mut state = AdamState::new(6);
    let pivot = if cfg.pose_pivot {
        let mut z: Vec<f64> = local.positions.iter().map(|p| p[2]).filter(|z| *z > 0.0).collect();
        Vector3::new(0.0, 0.0, crate::frame::median_in_place(&mut z).unwrap_or(0.0))
    } else {
        Vector3::zeros()
    };
    let mut pose = *init;
    let mut best = (f64::INFINITY, pose);
    let mut initial = f64::NAN;
    let mut diverged_run = 0usize;
    let mut history = Vec::with_capacity(cfg.pose_iterations);
    let mut iterations = 0;
    for it in 0..cfg.pose_iterations {
        let moved = transform_scene(local, &pose);
        let eval = photometric_eval(&moved, &Pose::identity(), k, target, lambda_dssim, ssim, cfg.pose_coverage_min)?;
        iterations = it + 1;
        if it == 0 {
            initial = eval.loss;
        }
        if eval.loss < best.0 {
            best = (eval.loss, pose);
        }
        // exact fit: Adam would only amplify round-off
        if eval.loss <= 1e-12 {
            break;
        }
        if eval.loss > 10.0 * initial {
            diverged_run += 1;
            if diverged_run >= 50 {
                return Err(Error::DivergedPose {
                    iteration: it,
                    loss: eval.loss,
                });
            }
        } else {
            diverged_run = 0;
        }
        history.push(best.0);
        if cfg.convergence_tol > 0.0 && it >= cfg.pose_patience {
            let before = history[it - cfg.pose_patience];
            if before - best.0 < cfg.convergence_tol * before.abs().max(1e-12) {
                break;
            }
        }
        let decay = cfg.pose_decay.powi((it / cfg.pose_decay_every) as i32);
        let (lr_r, lr_t) = (cfg.lr_pose_rotation * decay, cfg.lr_pose_translation * decay);
        // δx = ω × (x − c) + v, so ∂L/∂ω about c is g_ω + g_v × c
        pose = pivoted_pose_step(&pose, &eval.grads.d_pose, &pivot, &mut state, lr_r, lr_t, &hp)?;
    }
    Ok(PoseEstimate {
        pose: best.1,
        loss: best.0,
        initial_loss: initial,
        iterations,
    })
}

/// One Adam step on a pose from its left tangent gradient, with rotations
/// taken about `pivot` (camera coordinates).
pub fn pivoted_pose_step(
    pose: &Pose,
    g: &[f64; 6],
    pivot: &Vector3<f64>,
    state: &mut AdamState,
    lr_rotation: f64,
    lr_translation: f64,
    hp: &AdamHyper,
) -> Result<Pose> {
    let (lr_r, lr_t) = (lr_rotation, lr_translation);
    let g_v = Vector3::new(g[3], g[4], g[5]);
    let g_w = Vector3::new(g[0], g[1], g[2]) + g_v.cross(pivot);
    let grads = [g_w.x, g_w.y, g_w.z, g[3], g[4], g[5]];
    let delta = adam_update(state, &grads, &[lr_r, lr_r, lr_r, lr_t, lr_t, lr_t], hp)?;
    let omega = Vector3::new(delta[0], delta[1], delta[2]);
    let v = Vector3::new(delta[3], delta[4], delta[5]) + pivot - Quaternion::from_axis_angle(&omega).to_rotation_matrix() * pivot;
    Ok(pose.retract(&[omega.x, omega.y, omega.z, v.x, v.y, v.z]))
}
