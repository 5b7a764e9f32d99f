use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use super::forward::tile_pixels_sized;
use super::{sample_splat, ParamGrads, RenderOutput, ReplayKey};
use crate::error::{Error, Result};
use crate::geometry::{normalize_backward, projection_jacobian, quat_to_rotmat, rotmat_partials, Intrinsics, Pose, Quaternion};
use crate::scene::GaussianScene;

/// Per-splat screen-space partials: u, v, conic (a, b, c), opacity, rgb, depth.
type Partial = [f64; 10];

/// Adjoint of [`super::render`]: gradients of a scalar loss given its
/// gradients with respect to the rendered color and depth.
///
/// `forward` must come from rendering the same `scene`, `pose`, and `k`.
pub fn render_backward(
    scene: &GaussianScene,
    pose: &Pose,
    k: &Intrinsics,
    forward: &RenderOutput,
    d_color: &[f64],
    d_depth: &[f64],
) -> Result<ParamGrads> {
    render_backward_with(scene, pose, k, forward, d_color, d_depth, Reduction::Ordered)
}

/// How per-tile partial gradients are summed into per-splat gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Tile order; bit-identical regardless of thread count and scheduling.
    #[default]
    Ordered,
    /// Parallel fold/reduce; summation order follows work stealing.
    Unordered,
}

pub fn render_backward_with(
    scene: &GaussianScene,
    pose: &Pose,
    k: &Intrinsics,
    forward: &RenderOutput,
    d_color: &[f64],
    d_depth: &[f64],
    reduction: Reduction,
) -> Result<ParamGrads> {
    let replay = &forward.replay;
    if replay.key != ReplayKey::new(scene, pose, k) {
        return Err(Error::ReplayMismatch);
    }
    let n_pix = k.num_pixels();
    if d_color.len() != n_pix * 3 || d_depth.len() != n_pix {
        return Err(Error::ShapeMismatch {
            expected: format!("{} color / {} depth cotangents", n_pix * 3, n_pix),
            found: format!("{} / {}", d_color.len(), d_depth.len()),
        });
    }

    let splats = &replay.splats;
    let per_tile: Vec<Vec<Partial>> = replay
        .tiles
        .par_iter()
        .enumerate()
        .map(|(tid, list)| {
            let (tx, ty) = (tid % replay.tiles_x, tid / replay.tiles_x);
            let mut partial = vec![[0.0; 10]; list.len()];
            for (x, y) in tile_pixels_sized(tx, ty, replay.tile_size, k.width, k.height) {
                let i = y * k.width + x;
                let g = [d_color[3 * i], d_color[3 * i + 1], d_color[3 * i + 2]];
                let gd = d_depth[i];
                if g == [0.0; 3] && gd == 0.0 {
                    continue;
                }
                let (px, py) = (x as f64, y as f64);
                let mut t = replay.final_t[i];
                // Σ_{j behind} (g·c_j + gd·z_j) w_j
                let mut behind = 0.0;
                for kk in (0..replay.last[i] as usize).rev() {
                    let s = &splats[list[kk] as usize];
                    let Some(smp) = sample_splat(s, px, py) else { continue };
                    t /= 1.0 - smp.alpha;
                    let w = smp.alpha * t;
                    let shade = g[0] * s.color[0] + g[1] * s.color[1] + g[2] * s.color[2] + gd * s.depth;
                    let d_alpha = t * shade - behind / (1.0 - smp.alpha);
                    behind += shade * w;

                    let p = &mut partial[kk];
                    for ch in 0..3 {
                        p[6 + ch] += w * g[ch];
                    }
                    p[9] += w * gd;
                    if smp.clipped {
                        continue;
                    }
                    p[5] += d_alpha * smp.falloff;
                    // a = α exp(-½ m²)
                    let d_m2 = -0.5 * d_alpha * smp.alpha;
                    let [ca, cb, cc] = s.conic;
                    p[0] += d_m2 * -2.0 * (ca * smp.dx + cb * smp.dy);
                    p[1] += d_m2 * -2.0 * (cb * smp.dx + cc * smp.dy);
                    p[2] += d_m2 * smp.dx * smp.dx;
                    p[3] += d_m2 * 2.0 * smp.dx * smp.dy;
                    p[4] += d_m2 * smp.dy * smp.dy;
                }
            }
            partial
        })
        .collect();

    let add = |mut acc: Vec<Partial>, (list, partial): (&Vec<u32>, &Vec<Partial>)| {
        for (sid, p) in list.iter().zip(partial) {
            let a = &mut acc[*sid as usize];
            for c in 0..10 {
                a[c] += p[c];
            }
        }
        acc
    };
    let per_splat = match reduction {
        Reduction::Ordered => replay.tiles.iter().zip(&per_tile).fold(vec![[0.0; 10]; splats.len()], add),
        Reduction::Unordered => replay
            .tiles
            .par_iter()
            .zip(per_tile.par_iter())
            .fold(|| vec![[0.0; 10]; splats.len()], add)
            .reduce(
                || vec![[0.0; 10]; splats.len()],
                |mut a, b| {
                    for (x, y) in a.iter_mut().zip(&b) {
                        for c in 0..10 {
                            x[c] += y[c];
                        }
                    }
                    a
                },
            ),
    };

    let rot_pose = pose.rotation_matrix();
    let chained: Vec<SplatGrad> = splats
        .par_iter()
        .zip(per_splat.par_iter())
        .map(|(s, p)| chain_splat(scene, s.index as usize, s, p, &rot_pose, k))
        .collect();

    let mut grads = ParamGrads::zeros(scene.len());
    for (s, g) in splats.iter().zip(&chained) {
        let i = s.index as usize;
        grads.d_positions[i] = g.position;
        grads.d_colors[i] = g.color;
        grads.d_rotations[i] = g.rotation;
        grads.d_log_scales[i] = g.log_scale;
        grads.d_logit_opacities[i] = g.logit_opacity;
        grads.d_means2d[i] = g.mean2d;
        for c in 0..6 {
            grads.d_pose[c] += g.pose[c];
        }
    }
    Ok(grads)
}

struct SplatGrad {
    position: [f64; 3],
    color: [f64; 3],
    rotation: [f64; 4],
    log_scale: [f64; 3],
    logit_opacity: f64,
    mean2d: [f64; 2],
    pose: [f64; 6],
}

/// `vee(N) = (N₂₃ − N₃₂, N₃₁ − N₁₃, N₁₂ − N₂₁)`, so `tr([ω]x N) = ω · vee(N)`.
fn vee(n: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(n[(1, 2)] - n[(2, 1)], n[(2, 0)] - n[(0, 2)], n[(0, 1)] - n[(1, 0)])
}

fn chain_splat(
    scene: &GaussianScene,
    i: usize,
    s: &super::Splat,
    p: &Partial,
    rot_pose: &Matrix3<f64>,
    k: &Intrinsics,
) -> SplatGrad {
    let [du, dv, dca, dcb, dcc, d_opacity, dr, dg, db, d_depth] = *p;
    let pc = s.p_cam;
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let (iz, iz2, iz3) = (1.0 / z, 1.0 / (z * z), 1.0 / (z * z * z));

    // conic -> screen covariance: dΣ2d = -C G C
    let conic = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let g_conic = Matrix2::new(dca, 0.5 * dcb, 0.5 * dcb, dcc);
    let g_cov2d = -(conic * g_conic * conic);

    // Σ2d = J Σcam Jᵀ
    let j = projection_jacobian(k, &pc);
    let g_cov_cam = j.transpose() * g_cov2d * j;
    let g_j = 2.0 * g_cov2d * j * s.cov_cam;

    let mut g_p = Vector3::new(
        g_j[(0, 2)] * -k.fx * iz2,
        g_j[(1, 2)] * -k.fy * iz2,
        g_j[(0, 0)] * -k.fx * iz2
            + g_j[(0, 2)] * 2.0 * k.fx * x * iz3
            + g_j[(1, 1)] * -k.fy * iz2
            + g_j[(1, 2)] * 2.0 * k.fy * y * iz3,
    );
    g_p.x += du * k.fx * iz;
    g_p.y += dv * k.fy * iz;
    g_p.z += du * -k.fx * x * iz2 + dv * -k.fy * y * iz2 + d_depth;

    let g_mu = rot_pose.transpose() * g_p;
    let omega = pc.cross(&g_p) + 2.0 * vee(&(s.cov_cam * g_cov_cam));

    // Σcam = W Σ Wᵀ, Σ = R S² Rᵀ
    let g_cov_world = rot_pose.transpose() * g_cov_cam * rot_pose;
    let q_raw = Quaternion::from_array(scene.rotations[i]);
    let q = q_raw.normalized();
    let rot = quat_to_rotmat(&q);
    let scale = scene.scale(i);
    let s2 = Matrix3::from_diagonal(&scale.component_mul(&scale));
    let g_rot = 2.0 * g_cov_world * rot * s2;
    let partials = rotmat_partials(&q);
    let mut g_q = [0.0; 4];
    for (c, dr_dq) in partials.iter().enumerate() {
        g_q[c] = g_rot.component_mul(dr_dq).sum();
    }
    let rotation = normalize_backward(&q_raw, g_q);
    let inner = rot.transpose() * g_cov_world * rot;
    let log_scale = [
        2.0 * scale.x * scale.x * inner[(0, 0)],
        2.0 * scale.y * scale.y * inner[(1, 1)],
        2.0 * scale.z * scale.z * inner[(2, 2)],
    ];

    let alpha = s.opacity;
    SplatGrad {
        position: [g_mu.x, g_mu.y, g_mu.z],
        color: [dr, dg, db],
        rotation,
        log_scale,
        logit_opacity: d_opacity * alpha * (1.0 - alpha),
        mean2d: [du, dv],
        pose: [omega.x, omega.y, omega.z, g_p.x, g_p.y, g_p.z],
    }
}
