//! Progressive reconstruction from an unposed frame sequence.
//!
//! Frame 0 seeds the scene from its depth at the identity pose. Every later
//! frame gets a relative pose from a frozen local copy of the scene, adds
//! Gaussians where the scene does not yet cover it, and then drives a round
//! of global refinement that replays earlier frames.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frame::{median_in_place, DepthMap, Image};
use crate::geometry::{project, Intrinsics, Pose, Quaternion};
use crate::io::{layout, read_intrinsics, write_json, write_ply, write_tum, TumEntry};
use crate::losses::{depth_mask, dgc_loss, pgc_loss, rgb_loss, total_loss, LossComponents, LossConfig, MatchSet};
use crate::metrics::{psnr, ssim_metric};
use crate::optim::{estimate_relative_pose, pivoted_pose_step, scene_adam_step, AdamState, OptimizerConfig, SceneLearningRates};
use crate::providers::{DepthProvider, FileFrames, FrameProvider, MatchProvider, ProviderSpec};
use crate::raster::{render, render_backward_with, ParamGrads, Reduction, RenderOutput};
use crate::scene::{densify, init_from_depth, prune, reset_opacity, seed_gaussian, transform_scene, DensifyConfig, GaussianScene};

/// Where frames come from: PNG files under `root` named by `template`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSource {
    pub root: PathBuf,
    pub template: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub images: FrameSource,
    pub intrinsics: PathBuf,
    pub depth: ProviderSpec,
    pub matches: ProviderSpec,
    /// Use at most this many frames.
    pub frames: Option<usize>,
    /// Frames left out of training; they only get a test-time pose and are
    /// scored on the final scene.
    pub holdout: Vec<usize>,
    /// Pixel spacing of the Gaussians seeded from depth.
    pub init_stride: usize,
    pub seed: u64,
    /// Sum gradient partials in a fixed order.
    pub deterministic: bool,
    pub out_dir: PathBuf,
    /// Earlier frames replayed alongside the current one in each refinement step.
    pub replay_frames: usize,
    /// Pixels rendered with lower accumulated alpha receive new Gaussians.
    pub growth_alpha: f64,
    /// Rendered depth below this accumulated alpha is treated as missing.
    pub depth_min_alpha: f64,
    /// Margin in pixels when selecting the Gaussians visible in a frame.
    pub cull_margin: f64,
    /// Opacity reset every this many frames; 0 disables it.
    pub opacity_reset_every: usize,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub densify: DensifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            images: FrameSource {
                root: PathBuf::from("images"),
                template: "{index:06}.png".into(),
            },
            intrinsics: PathBuf::from(layout::INTRINSICS),
            depth: ProviderSpec::files("depth", "{index:06}.pfm"),
            matches: ProviderSpec::files("matches", "{prev:06}_{cur:06}.csv"),
            frames: None,
            holdout: Vec::new(),
            init_stride: 2,
            seed: 0,
            deterministic: true,
            out_dir: PathBuf::from("out"),
            replay_frames: 2,
            growth_alpha: 0.5,
            depth_min_alpha: 0.5,
            cull_margin: 8.0,
            opacity_reset_every: 4,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            densify: DensifyConfig::default(),
        }
    }
}

impl RunConfig {
    /// Inputs laid out as written by the synthetic generator.
    pub fn for_bundle(dir: &Path, out_dir: &Path) -> Self {
        Self {
            images: FrameSource {
                root: dir.to_path_buf(),
                template: layout::IMAGES.into(),
            },
            intrinsics: dir.join(layout::INTRINSICS),
            depth: ProviderSpec::files(dir, layout::DEPTH),
            matches: ProviderSpec::files(dir, layout::MATCHES),
            out_dir: out_dir.to_path_buf(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.densify.validate()?;
        let o = &self.optimizer;
        if o.init_iterations == 0 || o.iterations_per_frame == 0 || o.pose_iterations == 0 {
            return Err(Error::Config("iteration counts must be positive".into()));
        }
        if self.init_stride == 0 {
            return Err(Error::Config("init_stride must be >= 1".into()));
        }
        if self.frames == Some(0) {
            return Err(Error::Config("frames must be >= 1".into()));
        }
        if self.holdout.contains(&0) {
            return Err(Error::Config("frame 0 anchors the trajectory and cannot be held out".into()));
        }
        for (name, v) in [("growth_alpha", self.growth_alpha), ("depth_min_alpha", self.depth_min_alpha)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        if !(self.cull_margin >= 0.0) {
            return Err(Error::Config("cull_margin must be >= 0".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn reduction(&self) -> Reduction {
        if self.deterministic {
            Reduction::Ordered
        } else {
            Reduction::Unordered
        }
    }
}

/// World-to-camera poses of the processed frames; the first is frame 0 at
/// the identity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub entries: Vec<(usize, Pose)>,
}

impl Trajectory {
    pub fn anchored() -> Self {
        Self {
            entries: vec![(0, Pose::identity())],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last(&self) -> Option<&(usize, Pose)> {
        self.entries.last()
    }

    pub fn pose(&self, frame: usize) -> Option<Pose> {
        self.entries.iter().find(|(f, _)| *f == frame).map(|(_, p)| *p)
    }

    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|(f, _)| *f).collect()
    }

    /// Camera-to-world entries with the frame index as timestamp.
    pub fn to_tum(&self) -> Vec<TumEntry> {
        self.entries
            .iter()
            .map(|(f, p)| TumEntry {
                timestamp: *f as f64,
                camera_to_world: p.inverse(),
            })
            .collect()
    }
}

/// Everything the reconstruction reads.
pub struct Inputs {
    pub intrinsics: Intrinsics,
    pub frames: Box<dyn FrameProvider>,
    pub depth: Box<dyn DepthProvider>,
    pub matches: Box<dyn MatchProvider>,
}

impl Inputs {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let k = read_intrinsics(&cfg.intrinsics)?;
        let frames = FileFrames::open(&cfg.images.root, &cfg.images.template)?;
        Ok(Self {
            intrinsics: k,
            frames: Box::new(frames),
            depth: cfg.depth.open_depth(k.width, k.height)?,
            matches: cfg.matches.open_matches(k.width, k.height)?,
        })
    }

    fn frame(&self, index: usize) -> Result<Image> {
        let img = self.frames.frame(index)?;
        if img.width != self.intrinsics.width || img.height != self.intrinsics.height {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} frame", self.intrinsics.width, self.intrinsics.height),
                found: format!("{}x{} for frame {index}", img.width, img.height),
            });
        }
        Ok(img)
    }
}

/// One row of the run report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: usize,
    pub l_rgb: f64,
    pub l_pgc: f64,
    pub l_dgc: f64,
    pub l_total: f64,
    /// Camera-to-world pose, TUM order.
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub qw: f64,
    pub gaussians: usize,
    pub pose_iterations: usize,
    pub wall_ms: f64,
    pub error: String,
}

impl FrameReport {
    fn with_pose(mut self, w2c: &Pose) -> Self {
        let c2w = w2c.inverse();
        let q = c2w.rotation;
        (self.tx, self.ty, self.tz) = (c2w.translation.x, c2w.translation.y, c2w.translation.z);
        (self.qx, self.qy, self.qz, self.qw) = (q.x, q.y, q.z, q.w);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutResult {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Camera-to-world pose found at test time, TUM order.
    pub pose: [f64; 7],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub frames_processed: usize,
    pub gaussians: usize,
    pub holdout: Vec<HoldoutResult>,
    pub holdout_psnr_mean: Option<f64>,
    pub holdout_ssim_mean: Option<f64>,
    pub aborted: Option<String>,
    pub wall_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<FrameReport>,
    pub summary: RunSummary,
}

/// Scene and trajectory after initialization.
pub struct InitOutput {
    pub scene: GaussianScene,
    pub trajectory: Trajectory,
    /// Factor applied to provider depth to reach scene units.
    pub depth_scale: f64,
    pub loss: f64,
}

/// Seeds Gaussians from `depth0` rescaled to median 1 and fits their
/// appearance to `frame0` with positions frozen.
pub fn init_stage(frame0: &Image, depth0: &DepthMap, k: &Intrinsics, cfg: &RunConfig) -> Result<InitOutput> {
    let median = depth0.median().ok_or(Error::EmptyDepth)?;
    let depth_scale = 1.0 / median;
    let depth = depth0.scaled(depth_scale);
    let mut scene = init_from_depth(frame0, &depth, k, &Pose::identity(), cfg.init_stride)?;
    let lr = SceneLearningRates::from_config(&cfg.optimizer).frozen_positions();
    let hp = cfg.optimizer.hyper();
    let ssim = cfg.loss.ssim_params();
    let id = Pose::identity();
    let mut loss = f64::NAN;
    for _ in 0..cfg.optimizer.init_iterations {
        let out = render(&scene, &id, k);
        let (l, d_color) = rgb_loss(&out.color, frame0, cfg.loss.lambda_dssim, &ssim)?;
        loss = l;
        if l < 1e-12 {
            break;
        }
        let grads = render_backward_with(&scene, &id, k, &out, &d_color, &vec![0.0; k.num_pixels()], cfg.reduction())?;
        scene_adam_step(&mut scene, &grads, &lr, &hp)?;
    }
    Ok(InitOutput {
        scene,
        trajectory: Trajectory::anchored(),
        depth_scale,
        loss,
    })
}

/// Per-frame data kept for replay.
struct FrameData {
    image: Image,
    depth: DepthMap,
}

/// Mutable reconstruction state between frames.
pub struct State {
    pub scene: GaussianScene,
    pub trajectory: Trajectory,
    /// Provider depth to scene units, from frame 0.
    pub depth_scale: f64,
    /// Last single-step relative motion, for constant-velocity initialization.
    pub velocity: Pose,
    rng: ChaCha8Rng,
    data: Vec<(usize, FrameData)>,
}

impl State {
    fn data(&self, frame: usize) -> &FrameData {
        &self.data.iter().find(|(f, _)| *f == frame).expect("frame data cached").1
    }
}

/// Loss terms of one supervised view with the gradient already pulled back
/// to the scene.
struct Supervision {
    components: LossComponents,
    total: f64,
    grads: ParamGrads,
    /// Total-loss gradient with respect to the supervised frame's pose.
    d_pose: [f64; 6],
    /// (Gaussian index, screen-space gradient norm in NDC units) per visible splat.
    screen: Vec<(usize, f64)>,
}

/// Renders frame `f` (and its predecessor when PGC applies) and
/// backpropagates the total loss.
fn supervise(
    scene: &GaussianScene,
    k: &Intrinsics,
    data: &FrameData,
    pose: &Pose,
    prev: Option<(&Pose, &MatchSet)>,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Supervision> {
    let n_pix = k.num_pixels();
    let out = render(scene, pose, k);
    let (rgb, d_color) = rgb_loss(&out.color, &data.image, cfg.loss.lambda_dssim, &cfg.loss.ssim_params())?;
    let mut c = LossComponents {
        rgb,
        d_color,
        ..Default::default()
    };
    if cfg.loss.lambda_dgc > 0.0 {
        let rendered = out.depth_map(cfg.depth_min_alpha);
        let mask = depth_mask(&rendered, cfg.loss.depth_clamp_k);
        match dgc_loss(&data.depth, &rendered, &mask, &cfg.loss, seed) {
            Ok(o) => {
                c.dgc = o.value;
                c.d_depth_cur = o.d_rendered;
            }
            Err(Error::NoValidPatches) => {}
            Err(e) => return Err(e),
        }
    }
    let mut prev_render = None;
    if let (true, Some((pose_prev, set))) = (cfg.loss.lambda_pgc > 0.0, prev) {
        let po = render(scene, pose_prev, k);
        let depth_prev = po.depth_map(cfg.depth_min_alpha);
        let mask = depth_mask(&depth_prev, cfg.loss.depth_clamp_k);
        match pgc_loss(set, &depth_prev, pose_prev, pose, k, &cfg.loss, Some(&mask)) {
            Ok(o) => {
                c.pgc = o.value;
                c.d_depth_prev = o.d_depth;
                prev_render = Some((pose_prev, po));
            }
            Err(Error::NoValidMatches) => {}
            Err(e) => return Err(e),
        }
    }
    let total = total_loss(&c, &cfg.loss)?;
    let d_depth = if total.d_depth_cur.is_empty() {
        vec![0.0; n_pix]
    } else {
        total.d_depth_cur
    };
    let mut grads = render_backward_with(scene, pose, k, &out, &total.d_color, &d_depth, cfg.reduction())?;
    let screen = screen_gradients(&out, &grads, k);
    let mut d_pose = grads.d_pose;
    for (d, g) in d_pose.iter_mut().zip(&total.d_pose_cur) {
        *d += g;
    }
    if let Some((pose_prev, po)) = prev_render {
        let g = render_backward_with(scene, pose_prev, k, &po, &vec![0.0; 3 * n_pix], &total.d_depth_prev, cfg.reduction())?;
        grads.add_scaled(&g, 1.0);
    }
    Ok(Supervision {
        components: LossComponents {
            d_color: Vec::new(),
            d_depth_cur: Vec::new(),
            d_depth_prev: Vec::new(),
            ..c
        },
        total: total.value,
        grads,
        d_pose,
        screen,
    })
}

/// Pixel-space mean gradients converted to NDC units (`∂/∂ndc = ∂/∂px · size/2`).
fn screen_gradients(out: &RenderOutput, grads: &ParamGrads, k: &Intrinsics) -> Vec<(usize, f64)> {
    let (sx, sy) = (0.5 * k.width as f64, 0.5 * k.height as f64);
    out.replay
        .splats
        .iter()
        .map(|s| {
            let i = s.index as usize;
            let g = grads.d_means2d[i];
            (i, (g[0] * sx).hypot(g[1] * sy))
        })
        .collect()
}

/// Indices of Gaussians whose centers project inside the frame (plus margin).
fn visible(scene: &GaussianScene, pose: &Pose, k: &Intrinsics, margin: f64) -> Vec<usize> {
    (0..scene.len())
        .filter(|&i| {
            project(pose, k, &scene.position(i)).is_ok_and(|p| {
                p.u >= -margin && p.v >= -margin && p.u <= k.width as f64 - 1.0 + margin && p.v <= k.height as f64 - 1.0 + margin
            })
        })
        .collect()
}

fn median_camera_depth(scene: &GaussianScene, pose: &Pose, k: &Intrinsics, margin: f64) -> f64 {
    let mut z: Vec<f64> = visible(scene, pose, k, margin)
        .into_iter()
        .filter_map(|i| project(pose, k, &scene.position(i)).ok().map(|p| p.depth))
        .collect();
    median_in_place(&mut z).unwrap_or(0.0)
}

fn frame_seed(seed: u64, frame: usize, iteration: usize) -> u64 {
    seed ^ (frame as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (iteration as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

/// Adds Gaussians on the stride grid wherever the current render is thin,
/// placing them with provider depth rescaled to the scene by the median
/// rendered/provider ratio over well-covered pixels.
fn grow(state: &mut State, frame: usize, pose: &Pose, k: &Intrinsics, cfg: &RunConfig) -> Result<usize> {
    let out = render(&state.scene, pose, k);
    let data = state.data(frame);
    let mut ratios: Vec<f64> = (0..k.num_pixels())
        .filter(|&i| out.alpha[i] > 0.95 && data.depth.valid[i] && out.depth[i] > 0.0)
        .map(|i| out.depth[i] / out.alpha[i] / data.depth.values[i])
        .collect();
    let ratio = if ratios.len() >= 16 {
        median_in_place(&mut ratios).unwrap_or(state.depth_scale)
    } else {
        state.depth_scale
    };
    let stride = cfg.init_stride;
    let mut added = Vec::new();
    for y in (0..k.height).step_by(stride) {
        for x in (0..k.width).step_by(stride) {
            let i = y * k.width + x;
            if out.alpha[i] >= cfg.growth_alpha {
                continue;
            }
            let Some(d) = data.depth.at(x, y) else { continue };
            added.push(seed_gaussian(&data.image, k, pose, x, y, d * ratio, stride)?);
        }
    }
    for g in &added {
        state.scene.push(g);
    }
    Ok(added.len())
}

/// Global refinement after frame `t` joined: each step supervises `t` plus a
/// random sample of earlier training frames, with poses frozen.
fn refine(state: &mut State, t: usize, inputs: &Inputs, cfg: &RunConfig, move_pose: bool) -> Result<Supervision> {
    let k = &inputs.intrinsics;
    let lr = SceneLearningRates::from_config(&cfg.optimizer);
    let hp = cfg.optimizer.hyper();
    let earlier: Vec<usize> = state.trajectory.frames().into_iter().filter(|f| *f != t).collect();
    let mut pose_t = state.trajectory.pose(t).expect("current pose");
    let mut pose_state = AdamState::new(6);
    let pivot = if cfg.optimizer.pose_pivot {
        Vector3::new(0.0, 0.0, median_camera_depth(&state.scene, &pose_t, k, cfg.cull_margin))
    } else {
        Vector3::zeros()
    };
    // PGC needs the matches to the immediately preceding frame
    let pgc_pair = match t.checked_sub(1).and_then(|p| state.trajectory.pose(p).map(|pose| (p, pose))) {
        Some((p, pose_p)) if cfg.loss.lambda_pgc > 0.0 => match inputs.matches.matches(p, t) {
            Ok(set) => Some((pose_p, set)),
            Err(e) => {
                log::warn!("frame {t}: no matches to frame {p}, projection term skipped: {e}");
                None
            }
        },
        _ => None,
    };
    let mut last = None;
    for it in 0..cfg.optimizer.iterations_per_frame {
        let n_replay = cfg.replay_frames.min(earlier.len());
        let mut batch = vec![t];
        batch.extend(sample(&mut state.rng, earlier.len(), n_replay).into_iter().map(|j| earlier[j]));
        let scene = &state.scene;
        let eval = |f: &usize| -> Result<Supervision> {
            let pose = if *f == t { pose_t } else { state.trajectory.pose(*f).expect("trained frame") };
            let prev = if *f == t { pgc_pair.as_ref().map(|(p, s)| (p, s)) } else { None };
            supervise(scene, k, state.data(*f), &pose, prev, cfg, frame_seed(cfg.seed, *f, it))
        };
        let results: Vec<Supervision> = batch.par_iter().map(eval).collect::<Result<_>>()?;
        let w = 1.0 / batch.len() as f64;
        let mut grads = ParamGrads::zeros(state.scene.len());
        for r in &results {
            grads.add_scaled(&r.grads, w);
            for &(i, g) in &r.screen {
                state.scene.grad_accum[i] += g;
                state.scene.densify_counts[i] += 1;
            }
        }
        scene_adam_step(&mut state.scene, &grads, &lr, &hp)?;
        if move_pose {
            let n = cfg.optimizer.iterations_per_frame as f64;
            let f = cfg.optimizer.refine_pose_lr_end.powf(it as f64 / n);
            let (lr_r, lr_t) = (cfg.optimizer.lr_pose_rotation * f, cfg.optimizer.lr_pose_translation * f);
            pose_t = pivoted_pose_step(&pose_t, &results[0].d_pose, &pivot, &mut pose_state, lr_r, lr_t, &hp)?;
        }
        last = results.into_iter().next();
    }
    if let Some(e) = state.trajectory.entries.iter_mut().find(|e| e.0 == t) {
        e.1 = pose_t;
    }
    Ok(last.expect("at least one iteration"))
}

/// Linear blend of two poses in the tangent space of `a`.
fn interpolate(a: &Pose, b: &Pose, s: f64) -> Pose {
    let rel = b.compose(&a.inverse());
    let q = rel.rotation;
    let angle = q.angle();
    let axis = nalgebra::Vector3::new(q.x, q.y, q.z);
    let n = axis.norm();
    let omega = if n > 1e-15 { axis / n * angle * q.w.signum() } else { nalgebra::Vector3::zeros() };
    let r = omega * s;
    let v = rel.translation * s;
    a.retract(&[r.x, r.y, r.z, v.x, v.y, v.z])
}

impl State {
    /// Builds the state after frame 0.
    pub fn start(inputs: &Inputs, cfg: &RunConfig) -> Result<(Self, FrameReport)> {
        let started = Instant::now();
        let image = inputs.frame(0)?;
        let depth = inputs.depth.depth(0)?;
        let init = init_stage(&image, &depth, &inputs.intrinsics, cfg)?;
        let report = FrameReport {
            frame: 0,
            l_rgb: init.loss,
            l_total: cfg.loss.lambda_rgb * init.loss,
            gaussians: init.scene.len(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            ..Default::default()
        }
        .with_pose(&Pose::identity());
        Ok((
            Self {
                scene: init.scene,
                trajectory: init.trajectory,
                depth_scale: init.depth_scale,
                velocity: Pose::identity(),
                rng: ChaCha8Rng::seed_from_u64(cfg.seed),
                data: vec![(0, FrameData { image, depth })],
            },
            report,
        ))
    }

    /// Integrates frame `t`: relative pose from the last processed frame,
    /// growth, global refinement, and densification.
    pub fn step_frame(&mut self, t: usize, inputs: &Inputs, cfg: &RunConfig) -> Result<FrameReport> {
        let started = Instant::now();
        let k = &inputs.intrinsics;
        let image = inputs.frame(t)?;
        let depth = inputs.depth.depth(t)?;
        let &(prev, pose_prev) = self.trajectory.last().expect("anchored trajectory");

        let local_ids = visible(&self.scene, &pose_prev, k, cfg.cull_margin);
        let local = transform_scene(&self.scene.subset(&local_ids), &pose_prev);
        let init = if cfg.optimizer.constant_velocity {
            (1..t - prev).fold(self.velocity, |acc, _| self.velocity.compose(&acc))
        } else {
            Pose::identity()
        };
        let est = estimate_relative_pose(&local, &image, k, &init, &cfg.optimizer, cfg.loss.lambda_dssim, &cfg.loss.ssim_params())?;
        if t - prev == 1 {
            self.velocity = est.pose;
        }
        let pose = est.pose.compose(&pose_prev);
        self.trajectory.entries.push((t, pose));
        self.data.push((t, FrameData { image, depth }));

        let added = grow(self, t, &pose, k, cfg)?;
        let n_frames = self.trajectory.len() - 1;
        let reset = cfg.opacity_reset_every > 0 && n_frames % cfg.opacity_reset_every == 0;
        if reset {
            reset_opacity(&mut self.scene, cfg.densify.opacity_reset_cap);
        }
        // a freshly reset scene renders nearly transparent, so it cannot steer the pose
        let last = refine(self, t, inputs, cfg, cfg.optimizer.refine_pose && !reset)?;
        let pose = self.trajectory.pose(t).expect("current pose");
        if t - prev == 1 {
            self.velocity = pose.compose(&pose_prev.inverse());
        }
        let stats = densify(&mut self.scene, &cfg.densify, &mut self.rng);
        let pruned = prune(&mut self.scene, cfg.densify.prune_opacity, cfg.densify.prune_max_scale);
        log::info!(
            "frame {t}: pose loss {:.3e} -> {:.3e} in {} its, +{added} grown, {} cloned, {} split, {pruned} pruned, {} gaussians",
            est.initial_loss,
            est.loss,
            est.iterations,
            stats.cloned,
            stats.split,
            self.scene.len()
        );
        Ok(FrameReport {
            frame: t,
            l_rgb: last.components.rgb,
            l_pgc: last.components.pgc,
            l_dgc: last.components.dgc,
            l_total: last.total,
            gaussians: self.scene.len(),
            pose_iterations: est.iterations,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            ..Default::default()
        }
        .with_pose(&pose))
    }

    /// Test-time pose for a frame the scene never trained on, starting from
    /// the pose interpolated between its trained neighbours.
    pub fn evaluate_holdout(&self, frame: usize, inputs: &Inputs, cfg: &RunConfig) -> Result<HoldoutResult> {
        let k = &inputs.intrinsics;
        let image = inputs.frame(frame)?;
        let before = self.trajectory.entries.iter().filter(|(f, _)| *f < frame).max_by_key(|(f, _)| *f);
        let after = self.trajectory.entries.iter().filter(|(f, _)| *f > frame).min_by_key(|(f, _)| *f);
        let start = match (before, after) {
            (Some((fa, a)), Some((fb, b))) => interpolate(a, b, (frame - fa) as f64 / (fb - fa) as f64),
            (Some((_, a)), None) => *a,
            (None, Some((_, b))) => *b,
            (None, None) => Pose::identity(),
        };
        let ids = visible(&self.scene, &start, k, cfg.cull_margin);
        let local = transform_scene(&self.scene.subset(&ids), &start);
        let est = estimate_relative_pose(&local, &image, k, &Pose::identity(), &cfg.optimizer, cfg.loss.lambda_dssim, &cfg.loss.ssim_params())?;
        let pose = est.pose.compose(&start);
        let rendered = render(&self.scene, &pose, k);
        let c2w = pose.inverse();
        let q = c2w.rotation;
        Ok(HoldoutResult {
            frame,
            psnr: psnr(&rendered.color, &image)?,
            ssim: ssim_metric(&rendered.color, &image)?,
            pose: [c2w.translation.x, c2w.translation.y, c2w.translation.z, q.x, q.y, q.z, q.w],
        })
    }
}

/// Result of a reconstruction; `aborted` holds the error that stopped the
/// sequence early, in which case everything up to it is still reported.
pub struct Reconstruction {
    pub scene: GaussianScene,
    pub trajectory: Trajectory,
    pub report: RunReport,
    pub aborted: Option<Error>,
}

/// Runs the whole sequence in memory.
pub fn reconstruct(inputs: &Inputs, cfg: &RunConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    let started = Instant::now();
    let n = cfg.frames.map_or(inputs.frames.len(), |f| f.min(inputs.frames.len()));
    if n == 0 {
        return Err(Error::MissingResource {
            path: PathBuf::from("frame 0"),
        });
    }
    let (mut state, row0) = State::start(inputs, cfg)?;
    let mut rows = vec![row0];
    let mut aborted = None;
    for t in 1..n {
        if cfg.holdout.contains(&t) {
            continue;
        }
        match state.step_frame(t, inputs, cfg) {
            Ok(row) => rows.push(row),
            Err(e @ Error::DivergedPose { .. }) => {
                log::error!("frame {t}: {e}; stopping");
                rows.push(FrameReport {
                    frame: t,
                    error: e.to_string(),
                    ..Default::default()
                });
                aborted = Some(e);
                break;
            }
            Err(e) => {
                log::error!("frame {t}: {e}; skipped");
                rows.push(FrameReport {
                    frame: t,
                    error: e.to_string(),
                    ..Default::default()
                });
            }
        }
    }
    let mut holdout = Vec::new();
    if aborted.is_none() {
        for &h in cfg.holdout.iter().filter(|h| **h < n) {
            match state.evaluate_holdout(h, inputs, cfg) {
                Ok(r) => holdout.push(r),
                Err(e) => log::error!("holdout frame {h}: {e}"),
            }
        }
    }
    let mean = |f: fn(&HoldoutResult) -> f64| (!holdout.is_empty()).then(|| holdout.iter().map(f).sum::<f64>() / holdout.len() as f64);
    let summary = RunSummary {
        config_hash: cfg.hash(),
        frames_processed: state.trajectory.len(),
        gaussians: state.scene.len(),
        holdout_psnr_mean: mean(|h| h.psnr),
        holdout_ssim_mean: mean(|h| h.ssim),
        holdout,
        aborted: aborted.as_ref().map(|e| e.to_string()),
        wall_s: started.elapsed().as_secs_f64(),
    };
    Ok(Reconstruction {
        scene: state.scene,
        trajectory: state.trajectory,
        report: RunReport { rows, summary },
        aborted,
    })
}

pub mod outputs {
    pub const SCENE: &str = "scene.ply";
    pub const TRAJECTORY: &str = "trajectory.tum";
    pub const REPORT_CSV: &str = "report.csv";
    pub const REPORT_JSON: &str = "report.json";
    pub const HOLDOUT: &str = "holdout.tum";
}

/// Writes scene, trajectory, and reports into `dir`.
pub fn write_outputs(dir: &Path, r: &Reconstruction) -> Result<()> {
    write_ply(&dir.join(outputs::SCENE), &r.scene)?;
    write_tum(&dir.join(outputs::TRAJECTORY), &r.trajectory.to_tum())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &r.report.rows {
        w.serialize(row).map_err(|e| Error::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    crate::io::atomic_write(&dir.join(outputs::REPORT_CSV), &bytes)?;
    write_json(&dir.join(outputs::REPORT_JSON), &r.report)?;
    if !r.report.summary.holdout.is_empty() {
        let entries: Vec<TumEntry> = r
            .report
            .summary
            .holdout
            .iter()
            .map(|h| {
                let [tx, ty, tz, qx, qy, qz, qw] = h.pose;
                TumEntry {
                    timestamp: h.frame as f64,
                    camera_to_world: Pose::new(Quaternion::new(qw, qx, qy, qz), nalgebra::Vector3::new(tx, ty, tz)),
                }
            })
            .collect();
        write_tum(&dir.join(outputs::HOLDOUT), &entries)?;
    }
    Ok(())
}

/// Opens the inputs named by `cfg`, reconstructs, and writes the outputs,
/// including after an abort.
pub fn run(cfg: &RunConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    let inputs = Inputs::open(cfg)?;
    let r = reconstruct(&inputs, cfg)?;
    write_outputs(&cfg.out_dir, &r)?;
    Ok(r)
}
