//! Differentiable tile-based splat rasterizer.
//!
//! Per pixel, Gaussians are composited front to back in camera-depth order:
//!
//! ```text
//! a_i = min(α_i · exp(-½ Δᵀ Σ2d⁻¹ Δ), 0.99)
//! C   = Σ c_i a_i Π_{j<i}(1 - a_j)
//! D   = Σ z_i a_i Π_{j<i}(1 - a_j)
//! ```
//!
//! A splat only touches pixels inside its 3σ ellipse, and contributions below
//! 1/255 are skipped. Compositing stops before a splat would take the
//! transmittance below 1e-4. These rules are part of the image model, so the
//! tiled renderer, the brute-force reference, and the backward pass all apply
//! them identically.

mod backward;
mod forward;
mod reference;

use nalgebra::{Matrix2, Matrix3, Vector3};

pub use backward::{render_backward, render_backward_with, Reduction};
pub use forward::render;
pub use reference::render_reference;

use crate::frame::{DepthMap, Image};
use crate::geometry::{projection_jacobian, quat_to_rotmat, Intrinsics, Pose, Quaternion, COV2D_LOW_PASS};
use crate::scene::{sigmoid, GaussianScene};

pub const TILE_SIZE: usize = 16;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Splats closer than this to the camera plane are culled.
pub const NEAR_PLANE: f64 = 0.01;
pub const MAX_CONDITION: f64 = 1e12;
/// Squared Mahalanobis radius of the splat support (3σ).
const SUPPORT_M2: f64 = 9.0;

/// Rendered color, depth, and accumulated alpha plus the data the backward
/// pass needs to replay the compositing.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: Image,
    /// Alpha-weighted camera depth, not normalized by coverage.
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub(crate) replay: Replay,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    /// Rendered depth as a depth map, valid where coverage reaches `min_alpha`.
    pub fn depth_map(&self, min_alpha: f64) -> DepthMap {
        let valid = self
            .depth
            .iter()
            .zip(&self.alpha)
            .map(|(d, a)| *a >= min_alpha && *d > 0.0)
            .collect();
        DepthMap {
            width: self.width(),
            height: self.height(),
            values: self.depth.clone(),
            valid,
        }
    }

    /// Number of splats blended into each pixel.
    pub fn contributor_counts(&self) -> &[u32] {
        &self.replay.n_contrib
    }

    /// Hash of every discrete decision taken while compositing (support
    /// membership, skips, clipping, termination). Two renders with equal
    /// signatures lie on the same smooth branch of the image model.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for ((n, c), l) in self.replay.n_contrib.iter().zip(&self.replay.n_clipped).zip(&self.replay.last) {
            h.write_u32(*n);
            h.write_u32(*c);
            h.write_u32(*l);
        }
        h.finish()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Replay {
    pub key: ReplayKey,
    pub splats: Vec<Splat>,
    /// Splat indices per tile (front to back); the reference renderer uses a
    /// single tile covering the image.
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
    pub tile_size: usize,
    pub final_t: Vec<f64>,
    /// Per pixel, one past the last tile-list entry that was composited.
    pub last: Vec<u32>,
    pub n_contrib: Vec<u32>,
    pub n_clipped: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct ReplayKey {
    pub scene: u64,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

impl ReplayKey {
    fn new(scene: &GaussianScene, pose: &Pose, k: &Intrinsics) -> Self {
        Self {
            scene: scene.fingerprint(),
            pose: *pose,
            intrinsics: *k,
        }
    }
}

/// A Gaussian projected into the image.
#[derive(Clone, Debug)]
pub(crate) struct Splat {
    pub index: u32,
    pub mean: [f64; 2],
    pub depth: f64,
    /// Inverse screen covariance as `(a, b, c)` with `m² = aΔx² + 2bΔxΔy + cΔy²`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub p_cam: Vector3<f64>,
    pub cov_cam: Matrix3<f64>,
    /// Inclusive pixel bounds of the 3σ ellipse, clipped to the image.
    pub rect: [usize; 4],
}

/// Projects one Gaussian; `None` when culled.
pub(crate) fn project_splat(
    scene: &GaussianScene,
    i: usize,
    pose_rot: &Matrix3<f64>,
    pose: &Pose,
    k: &Intrinsics,
) -> Option<Splat> {
    let mu = scene.position(i);
    let p = pose_rot * mu + pose.translation;
    if !(p.z > NEAR_PLANE) {
        return None;
    }
    let rot = quat_to_rotmat(&Quaternion::from_array(scene.rotations[i]));
    let s = scene.scale(i);
    let m = rot * Matrix3::from_diagonal(&s);
    let cov_world = m * m.transpose();
    let cov_cam = pose_rot * cov_world * pose_rot.transpose();
    let j = projection_jacobian(k, &p);
    let cov2d: Matrix2<f64> = j * cov_cam * j.transpose() + Matrix2::identity() * COV2D_LOW_PASS;
    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let mid = 0.5 * (a + c);
    let disc = (mid * mid - det).max(0.0).sqrt();
    let (l_max, l_min) = (mid + disc, mid - disc);
    if !(l_min > 0.0) || l_max / l_min > MAX_CONDITION {
        return None;
    }
    let u = k.cx + k.fx * p.x / p.z;
    let v = k.cy + k.fy * p.y / p.z;
    let ex = 3.0 * a.sqrt();
    let ey = 3.0 * c.sqrt();
    let (x0, x1) = ((u - ex).ceil(), (u + ex).floor());
    let (y0, y1) = ((v - ey).ceil(), (v + ey).floor());
    if x1 < 0.0 || y1 < 0.0 || x0 > (k.width - 1) as f64 || y0 > (k.height - 1) as f64 || x0 > x1 || y0 > y1 {
        return None;
    }
    let rect = [
        x0.max(0.0) as usize,
        (x1 as usize).min(k.width - 1),
        y0.max(0.0) as usize,
        (y1 as usize).min(k.height - 1),
    ];
    Some(Splat {
        index: i as u32,
        mean: [u, v],
        depth: p.z,
        conic: [c / det, -b / det, a / det],
        opacity: sigmoid(scene.logit_opacities[i]),
        color: scene.colors[i],
        p_cam: p,
        cov_cam,
        rect,
    })
}

/// Projects every Gaussian and returns the survivors sorted front to back,
/// ties broken by Gaussian index.
pub(crate) fn project_all(scene: &GaussianScene, pose: &Pose, k: &Intrinsics) -> Vec<Splat> {
    use rayon::prelude::*;
    let rot = pose.rotation_matrix();
    let mut splats: Vec<Splat> = (0..scene.len())
        .into_par_iter()
        .filter_map(|i| project_splat(scene, i, &rot, pose, k))
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    splats
}

/// Evaluation of one splat at one pixel.
pub(crate) struct Sample {
    pub alpha: f64,
    /// Unclipped Gaussian falloff `exp(-½ m²)`.
    pub falloff: f64,
    pub dx: f64,
    pub dy: f64,
    pub clipped: bool,
}

#[inline]
pub(crate) fn sample_splat(s: &Splat, px: f64, py: f64) -> Option<Sample> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let [a, b, c] = s.conic;
    let m2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if !(m2 <= SUPPORT_M2) {
        return None;
    }
    let falloff = (-0.5 * m2).exp();
    let raw = s.opacity * falloff;
    let clipped = raw > MAX_ALPHA;
    let alpha = if clipped { MAX_ALPHA } else { raw };
    if alpha < MIN_ALPHA {
        return None;
    }
    Some(Sample {
        alpha,
        falloff,
        dx,
        dy,
        clipped,
    })
}

/// Result of compositing one pixel.
pub(crate) struct PixelResult {
    pub color: [f64; 3],
    pub depth: f64,
    pub transmittance: f64,
    pub last: u32,
    pub n_contrib: u32,
    pub n_clipped: u32,
}

/// Composites the splats named by `list` (front to back) at pixel `(px, py)`.
#[inline]
pub(crate) fn composite_pixel(splats: &[Splat], list: impl Iterator<Item = u32>, px: f64, py: f64) -> PixelResult {
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut last = 0u32;
    let mut n_contrib = 0u32;
    let mut n_clipped = 0u32;
    for (k, sid) in list.enumerate() {
        let s = &splats[sid as usize];
        let Some(smp) = sample_splat(s, px, py) else { continue };
        let next_t = t * (1.0 - smp.alpha);
        if next_t < MIN_TRANSMITTANCE {
            break;
        }
        let w = smp.alpha * t;
        for ch in 0..3 {
            color[ch] += s.color[ch] * w;
        }
        depth += s.depth * w;
        t = next_t;
        last = k as u32 + 1;
        n_contrib += 1;
        n_clipped += smp.clipped as u32;
    }
    PixelResult {
        color,
        depth,
        transmittance: t,
        last,
        n_contrib,
        n_clipped,
    }
}

/// Gradients of a scalar loss with respect to every scene parameter and the
/// camera pose.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    pub d_positions: Vec<[f64; 3]>,
    pub d_colors: Vec<[f64; 3]>,
    pub d_rotations: Vec<[f64; 4]>,
    pub d_log_scales: Vec<[f64; 3]>,
    pub d_logit_opacities: Vec<f64>,
    /// Left-perturbation tangent gradient `[ω; v]`, see [`Pose::retract`].
    pub d_pose: [f64; 6],
    /// Gradient with respect to the projected pixel centers.
    pub d_means2d: Vec<[f64; 2]>,
}

impl ParamGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_positions: vec![[0.0; 3]; n],
            d_colors: vec![[0.0; 3]; n],
            d_rotations: vec![[0.0; 4]; n],
            d_log_scales: vec![[0.0; 3]; n],
            d_logit_opacities: vec![0.0; n],
            d_pose: [0.0; 6],
            d_means2d: vec![[0.0; 2]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_positions.is_empty()
    }

    /// `self += w * other`.
    pub fn add_scaled(&mut self, other: &ParamGrads, w: f64) {
        fn axpy<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]], w: f64) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..N {
                    x[k] += w * y[k];
                }
            }
        }
        axpy(&mut self.d_positions, &other.d_positions, w);
        axpy(&mut self.d_colors, &other.d_colors, w);
        axpy(&mut self.d_rotations, &other.d_rotations, w);
        axpy(&mut self.d_log_scales, &other.d_log_scales, w);
        axpy(&mut self.d_means2d, &other.d_means2d, w);
        for (x, y) in self.d_logit_opacities.iter_mut().zip(&other.d_logit_opacities) {
            *x += w * y;
        }
        for k in 0..6 {
            self.d_pose[k] += w * other.d_pose[k];
        }
    }

    pub fn all_finite(&self) -> bool {
        self.d_positions.iter().flatten().all(|v| v.is_finite())
            && self.d_colors.iter().flatten().all(|v| v.is_finite())
            && self.d_rotations.iter().flatten().all(|v| v.is_finite())
            && self.d_log_scales.iter().flatten().all(|v| v.is_finite())
            && self.d_logit_opacities.iter().all(|v| v.is_finite())
            && self.d_pose.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests;
