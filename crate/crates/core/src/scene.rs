//! Gaussian scene storage and its density lifecycle (densify, prune, opacity reset).

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{DepthMap, Image};
use crate::geometry::{backproject, quat_to_rotmat, Intrinsics, Pose, Quaternion};

/// Number of scalar parameters per Gaussian (position 3, color 3, rotation 4,
/// log-scale 3, logit-opacity 1).
pub const PARAMS_PER_GAUSSIAN: usize = 14;

pub const INIT_OPACITY: f64 = 0.1;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Structure-of-arrays Gaussian set with unconstrained parameters and the
/// per-parameter optimizer moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianScene {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    /// Quaternions, w-first.
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub logit_opacities: Vec<f64>,
    /// Sum of screen-space positional gradient norms since the last densify.
    pub grad_accum: Vec<f64>,
    /// Number of backward passes accumulated into `grad_accum`.
    pub densify_counts: Vec<u32>,
    pub(crate) moments: Moments,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct Moments {
    pub first: Vec<[f64; PARAMS_PER_GAUSSIAN]>,
    pub second: Vec<[f64; PARAMS_PER_GAUSSIAN]>,
    pub step: u64,
}

/// Fields of a single Gaussian in decoded form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
    pub rotation: Quaternion,
    pub scale: Vector3<f64>,
    pub opacity: f64,
}

impl GaussianScene {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, g: &Gaussian) {
        debug_assert!(g.scale.iter().all(|s| *s > 0.0));
        self.push_raw(
            [g.position.x, g.position.y, g.position.z],
            g.color,
            g.rotation.normalized().to_array(),
            [g.scale.x.ln(), g.scale.y.ln(), g.scale.z.ln()],
            logit(g.opacity),
        );
    }

    pub fn push_raw(&mut self, pos: [f64; 3], color: [f64; 3], rot: [f64; 4], log_scale: [f64; 3], logit_opacity: f64) {
        self.positions.push(pos);
        self.colors.push(color);
        self.rotations.push(rot);
        self.log_scales.push(log_scale);
        self.logit_opacities.push(logit_opacity);
        self.grad_accum.push(0.0);
        self.densify_counts.push(0);
        self.moments.first.push([0.0; PARAMS_PER_GAUSSIAN]);
        self.moments.second.push([0.0; PARAMS_PER_GAUSSIAN]);
    }

    pub fn gaussian(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.position(i),
            color: self.colors[i],
            rotation: Quaternion::from_array(self.rotations[i]),
            scale: self.scale(i),
            opacity: self.opacity(i),
        }
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.positions[i])
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        let s = self.log_scales[i];
        Vector3::new(s[0].exp(), s[1].exp(), s[2].exp())
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.logit_opacities[i])
    }

    pub fn max_scale(&self, i: usize) -> f64 {
        self.log_scales[i].iter().copied().fold(f64::NEG_INFINITY, f64::max).exp()
    }

    /// Keeps the Gaussians whose index satisfies `keep`, preserving order.
    pub fn retain_indices(&mut self, mut keep: impl FnMut(usize) -> bool) {
        let flags: Vec<bool> = (0..self.len()).map(&mut keep).collect();
        fn filter<T: Copy>(v: &mut Vec<T>, flags: &[bool]) {
            let mut k = 0;
            v.retain(|_| {
                k += 1;
                flags[k - 1]
            });
        }
        filter(&mut self.positions, &flags);
        filter(&mut self.colors, &flags);
        filter(&mut self.rotations, &flags);
        filter(&mut self.log_scales, &flags);
        filter(&mut self.logit_opacities, &flags);
        filter(&mut self.grad_accum, &flags);
        filter(&mut self.densify_counts, &flags);
        filter(&mut self.moments.first, &flags);
        filter(&mut self.moments.second, &flags);
    }

    /// Copy of the Gaussians at `indices`, with fresh optimizer state.
    pub fn subset(&self, indices: &[usize]) -> GaussianScene {
        let mut out = GaussianScene::new();
        for &i in indices {
            out.push_raw(
                self.positions[i],
                self.colors[i],
                self.rotations[i],
                self.log_scales[i],
                self.logit_opacities[i],
            );
        }
        out
    }

    /// Appends all Gaussians of `other` with fresh optimizer state.
    pub fn extend_from(&mut self, other: &GaussianScene) {
        for i in 0..other.len() {
            self.push_raw(
                other.positions[i],
                other.colors[i],
                other.rotations[i],
                other.log_scales[i],
                other.logit_opacities[i],
            );
        }
    }

    /// Parameter-only equality within `tol` (optimizer state ignored).
    pub fn params_close(&self, other: &GaussianScene, tol: f64) -> bool {
        fn close<const N: usize>(a: &[[f64; N]], b: &[[f64; N]], tol: f64) -> bool {
            a.iter().zip(b).all(|(x, y)| x.iter().zip(y).all(|(p, q)| (p - q).abs() <= tol))
        }
        self.len() == other.len()
            && close(&self.positions, &other.positions, tol)
            && close(&self.colors, &other.colors, tol)
            && close(&self.rotations, &other.rotations, tol)
            && close(&self.log_scales, &other.log_scales, tol)
            && self
                .logit_opacities
                .iter()
                .zip(&other.logit_opacities)
                .all(|(a, b)| (a - b).abs() <= tol)
    }

    /// Hash of the raw parameter bits, used to tie render replay data to a scene.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        h.write_usize(self.len());
        for i in 0..self.len() {
            for v in self.positions[i]
                .iter()
                .chain(&self.colors[i])
                .chain(&self.rotations[i])
                .chain(&self.log_scales[i])
                .chain(std::iter::once(&self.logit_opacities[i]))
            {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        (0..self.len()).all(|i| {
            self.positions[i]
                .iter()
                .chain(&self.colors[i])
                .chain(&self.rotations[i])
                .chain(&self.log_scales[i])
                .all(|v| v.is_finite())
                && self.logit_opacities[i].is_finite()
        })
    }

    /// Mean screen-space gradient norm since the last densify.
    pub fn mean_grad(&self, i: usize) -> f64 {
        if self.densify_counts[i] == 0 {
            0.0
        } else {
            self.grad_accum[i] / self.densify_counts[i] as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Mean screen-space positional gradient (NDC units) that triggers densification.
    pub grad_threshold: f64,
    /// Gaussians whose largest scale is above this are split, smaller ones cloned.
    pub split_scale_threshold: f64,
    /// Children of a split get `parent_scale / split_factor`.
    pub split_factor: f64,
    pub prune_opacity: f64,
    /// Gaussians larger than this (scene units) are pruned.
    pub prune_max_scale: f64,
    /// Standard deviation of the clone offset, as a fraction of the parent's scales.
    pub clone_jitter_sigma: f64,
    pub opacity_reset_cap: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            split_scale_threshold: 0.01,
            split_factor: 1.6,
            prune_opacity: 5e-3,
            prune_max_scale: 0.5,
            clone_jitter_sigma: 0.5,
            opacity_reset_cap: 0.01,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.grad_threshold,
            self.split_scale_threshold,
            self.split_factor,
            self.prune_opacity,
            self.prune_max_scale,
            self.clone_jitter_sigma,
            self.opacity_reset_cap,
        ]
        .iter()
        .all(|v| *v > 0.0);
        if all_positive {
            Ok(())
        } else {
            Err(Error::Config(format!("densify parameters must be positive: {self:?}")))
        }
    }
}

/// One Gaussian per valid sampled pixel, placed by back-projecting its depth.
pub fn init_from_depth(
    image: &Image,
    depth: &DepthMap,
    k: &Intrinsics,
    pose: &Pose,
    stride: usize,
) -> Result<GaussianScene> {
    if stride == 0 {
        return Err(Error::Config("init stride must be >= 1".into()));
    }
    depth.same_shape(image.width, image.height)?;
    let mut scene = GaussianScene::new();
    for y in (0..image.height).step_by(stride) {
        for x in (0..image.width).step_by(stride) {
            let Some(d) = depth.at(x, y) else { continue };
            scene.push(&seed_gaussian(image, k, pose, x, y, d, stride)?);
        }
    }
    if scene.is_empty() {
        return Err(Error::EmptyDepth);
    }
    Ok(scene)
}

/// Relative depth offset applied to seeds, scaled by [`tie_break`].
pub const SEED_DEPTH_JITTER: f64 = 5e-3;

/// Deterministic value in `[-1, 1)` hashed from pixel coordinates.
fn tie_break(x: usize, y: usize) -> f64 {
    let mut h = (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 29;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 32;
    (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

pub(crate) fn seed_gaussian(
    image: &Image,
    k: &Intrinsics,
    pose: &Pose,
    x: usize,
    y: usize,
    depth: f64,
    stride: usize,
) -> Result<Gaussian> {
    // Seeds from a planar depth patch would otherwise tie exactly in depth, making the
    // compositing order (and the render) jump under any rotation.
    let position = backproject(pose, k, (x as f64, y as f64), depth * (1.0 + SEED_DEPTH_JITTER * tie_break(x, y)))?;
    // one pixel footprint per sample spacing
    let s = depth / k.fx.min(k.fy) * stride as f64;
    Ok(Gaussian {
        position,
        color: image.pixel(x, y),
        rotation: Quaternion::identity(),
        scale: Vector3::new(s, s, s),
        opacity: INIT_OPACITY,
    })
}

/// Applies a rigid transform to every Gaussian: `μ' = Aμ`, `r' = rot(A)·r`.
pub fn transform_scene(scene: &GaussianScene, a: &Pose) -> GaussianScene {
    let mut out = scene.clone();
    transform_scene_in_place(&mut out, a);
    out
}

pub fn transform_scene_in_place(scene: &mut GaussianScene, a: &Pose) {
    let rot = a.rotation_matrix();
    for i in 0..scene.len() {
        let p = rot * Vector3::from(scene.positions[i]) + a.translation;
        scene.positions[i] = [p.x, p.y, p.z];
        let r = a.rotation.mul(&Quaternion::from_array(scene.rotations[i]));
        scene.rotations[i] = r.to_array();
    }
}

/// Clones small and splits large Gaussians whose mean screen-space gradient
/// exceeds the threshold, then resets the gradient statistics.
pub fn densify(scene: &mut GaussianScene, cfg: &DensifyConfig, rng: &mut impl Rng) -> DensifyStats {
    let n = scene.len();
    let mut stats = DensifyStats::default();
    let mut remove = vec![false; n];
    for i in 0..n {
        if scene.mean_grad(i) <= cfg.grad_threshold {
            continue;
        }
        let g = scene.gaussian(i);
        let rot = quat_to_rotmat(&g.rotation);
        let sample = |rng: &mut dyn rand::RngCore, sigma: f64| {
            let e = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            rot * g.scale.component_mul(&e) * sigma
        };
        if scene.max_scale(i) <= cfg.split_scale_threshold {
            let offset = sample(rng, cfg.clone_jitter_sigma);
            let mut child = g;
            child.position += offset;
            scene.push(&child);
            stats.cloned += 1;
        } else {
            for _ in 0..2 {
                let mut child = g;
                child.position += sample(rng, 1.0);
                child.scale = g.scale / cfg.split_factor;
                scene.push(&child);
            }
            remove[i] = true;
            stats.split += 1;
        }
    }
    if stats.split > 0 {
        scene.retain_indices(|i| i >= n || !remove[i]);
    }
    scene.grad_accum.iter_mut().for_each(|g| *g = 0.0);
    scene.densify_counts.iter_mut().for_each(|c| *c = 0);
    stats
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyStats {
    pub cloned: usize,
    pub split: usize,
}

/// Removes near-transparent and oversized Gaussians; returns the number removed.
pub fn prune(scene: &mut GaussianScene, min_opacity: f64, max_scale: f64) -> usize {
    let before = scene.len();
    let keep: Vec<bool> = (0..before)
        .map(|i| scene.opacity(i) >= min_opacity && scene.max_scale(i) <= max_scale)
        .collect();
    scene.retain_indices(|i| keep[i]);
    before - scene.len()
}

/// Caps every opacity at `cap` and clears the opacity optimizer moments.
pub fn reset_opacity(scene: &mut GaussianScene, cap: f64) {
    let cap_logit = logit(cap);
    for i in 0..scene.len() {
        if scene.logit_opacities[i] > cap_logit {
            scene.logit_opacities[i] = cap_logit;
        }
        scene.moments.first[i][13] = 0.0;
        scene.moments.second[i][13] = 0.0;
    }
}
