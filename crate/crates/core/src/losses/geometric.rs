use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LossConfig, MatchSet, PgcMode};
use crate::error::{Error, Result};
use crate::frame::DepthMap;
use crate::geometry::{Intrinsics, Pose, DEPTH_EPS};

/// Pixels whose depth is valid and at most `k` times the median valid depth.
pub fn depth_mask(depth: &DepthMap, k: f64) -> Vec<bool> {
    let Some(median) = depth.median() else {
        return vec![false; depth.values.len()];
    };
    let limit = k * median;
    depth
        .values
        .iter()
        .zip(&depth.valid)
        .map(|(d, v)| *v && *d <= limit)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PgcOutput {
    pub value: f64,
    /// Gradient with respect to the previous frame's rendered depth, per pixel.
    pub d_depth: Vec<f64>,
    /// Gradient with respect to the current pose (left tangent, `[ω; v]`).
    pub d_pose: [f64; 6],
    /// Matches that survived filtering and projected in front of the camera.
    pub used: usize,
}

struct Reprojected {
    pixel: usize,
    /// Current-frame camera point.
    p_cam: Vector3<f64>,
    /// `d p_cam / d depth`.
    dp_ddepth: Vector3<f64>,
    /// Predicted displacement vector and its length.
    delta: [f64; 2],
    predicted: f64,
    observed: f64,
}

/// Projection consistency between match displacements and the displacements
/// implied by rendered depth of the previous frame and the two poses.
///
/// Each surviving match is back-projected from the previous frame with the
/// rendered depth at its nearest pixel, projected into the current frame, and
/// compared with the observed displacement. `mask`, if given, excludes pixels
/// of the previous depth.
pub fn pgc_loss(
    matches: &MatchSet,
    depth_prev: &DepthMap,
    pose_prev: &Pose,
    pose_cur: &Pose,
    k: &Intrinsics,
    cfg: &LossConfig,
    mask: Option<&[bool]>,
) -> Result<PgcOutput> {
    let (w, h) = (depth_prev.width, depth_prev.height);
    let inv_prev = pose_prev.inverse();
    let r_inv = inv_prev.rotation_matrix();
    let r_cur = pose_cur.rotation_matrix();
    let r_rel = r_cur * r_inv;

    let mut rows = Vec::new();
    for m in &matches.matches {
        if m.confidence < cfg.confidence_min {
            continue;
        }
        let (x, y) = (m.u_prev.round(), m.v_prev.round());
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            continue;
        }
        let pixel = y as usize * w + x as usize;
        if !depth_prev.valid[pixel] || mask.is_some_and(|mk| !mk[pixel]) {
            continue;
        }
        let d = depth_prev.values[pixel];
        let ray = k.ray(m.u_prev, m.v_prev);
        let world = inv_prev.transform_point(&(ray * d));
        let p_cam = pose_cur.transform_point(&world);
        if p_cam.z <= DEPTH_EPS {
            continue;
        }
        let u = k.cx + k.fx * p_cam.x / p_cam.z;
        let v = k.cy + k.fy * p_cam.y / p_cam.z;
        let delta = [u - m.u_prev, v - m.v_prev];
        rows.push(Reprojected {
            pixel,
            p_cam,
            dp_ddepth: r_rel * ray,
            delta,
            predicted: delta[0].hypot(delta[1]),
            observed: m.displacement(),
        });
    }
    if rows.is_empty() {
        return Err(Error::NoValidMatches);
    }

    let n = rows.len() as f64;
    let (value, weights): (f64, Vec<f64>) = match cfg.pgc_mode {
        PgcMode::Mean => {
            let obs = rows.iter().map(|r| r.observed).sum::<f64>() / n;
            let pred = rows.iter().map(|r| r.predicted).sum::<f64>() / n;
            let s = sign(pred - obs);
            ((obs - pred).abs(), vec![s / n; rows.len()])
        }
        PgcMode::PerMatch => {
            let value = rows.iter().map(|r| (r.predicted - r.observed).abs()).sum::<f64>() / n;
            (value, rows.iter().map(|r| sign(r.predicted - r.observed) / n).collect())
        }
    };

    let mut d_depth = vec![0.0; w * h];
    let mut d_pose = [0.0; 6];
    for (r, wgt) in rows.iter().zip(&weights) {
        if *wgt == 0.0 || r.predicted == 0.0 {
            continue;
        }
        let g_uv = [wgt * r.delta[0] / r.predicted, wgt * r.delta[1] / r.predicted];
        let p = r.p_cam;
        let (iz, iz2) = (1.0 / p.z, 1.0 / (p.z * p.z));
        let g_p = Vector3::new(
            g_uv[0] * k.fx * iz,
            g_uv[1] * k.fy * iz,
            -g_uv[0] * k.fx * p.x * iz2 - g_uv[1] * k.fy * p.y * iz2,
        );
        d_depth[r.pixel] += g_p.dot(&r.dp_ddepth);
        let omega = p.cross(&g_p);
        for c in 0..3 {
            d_pose[c] += omega[c];
            d_pose[3 + c] += g_p[c];
        }
    }
    Ok(PgcOutput {
        value,
        d_depth,
        d_pose,
        used: rows.len(),
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DgcOutput {
    pub value: f64,
    /// Gradient with respect to the rendered depth, per pixel.
    pub d_rendered: Vec<f64>,
    /// Top-left corners of the accepted patches.
    pub patches: Vec<(usize, usize)>,
}

/// One minus the mean patchwise Pearson correlation between provider and
/// rendered depth.
///
/// Patches of `dgc_patch_size` are drawn uniformly with a generator seeded by
/// `seed`; a patch is kept only if every pixel is valid in both maps and set in
/// `mask`. Sampling stops after `dgc_patch_count` patches or ten times that many
/// attempts.
pub fn dgc_loss(provider: &DepthMap, rendered: &DepthMap, mask: &[bool], cfg: &LossConfig, seed: u64) -> Result<DgcOutput> {
    rendered.same_shape(provider.width, provider.height)?;
    let (w, h) = (provider.width, provider.height);
    if mask.len() != w * h {
        return Err(Error::ShapeMismatch {
            expected: format!("{} mask entries", w * h),
            found: mask.len().to_string(),
        });
    }
    let a = cfg.dgc_patch_size;
    if a > w || a > h {
        return Err(Error::NoValidPatches);
    }
    let ok: Vec<bool> = (0..w * h).map(|i| mask[i] && provider.valid[i] && rendered.valid[i]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::new();
    for _ in 0..cfg.dgc_patch_count * 10 {
        if patches.len() == cfg.dgc_patch_count {
            break;
        }
        let x0 = rng.gen_range(0..=w - a);
        let y0 = rng.gen_range(0..=h - a);
        if (y0..y0 + a).all(|y| ok[y * w + x0..y * w + x0 + a].iter().all(|v| *v)) {
            patches.push((x0, y0));
        }
    }
    if patches.is_empty() {
        return Err(Error::NoValidPatches);
    }

    let eps = cfg.pearson_eps;
    let n = (a * a) as f64;
    let np = patches.len() as f64;
    let mut corr_sum = 0.0;
    let mut d_rendered = vec![0.0; w * h];
    let mut idx = Vec::with_capacity(a * a);
    for &(x0, y0) in &patches {
        idx.clear();
        idx.extend((y0..y0 + a).flat_map(|y| (x0..x0 + a).map(move |x| y * w + x)));
        let md = idx.iter().map(|i| provider.values[*i]).sum::<f64>() / n;
        let mr = idx.iter().map(|i| rendered.values[*i]).sum::<f64>() / n;
        let (mut cov, mut vd, mut vr) = (0.0, 0.0, 0.0);
        for i in &idx {
            let (p, r) = (provider.values[*i] - md, rendered.values[*i] - mr);
            cov += p * r;
            vd += p * p;
            vr += r * r;
        }
        cov /= n;
        let sd = (vd / n).sqrt();
        let sr = (vr / n).sqrt();
        let den = (sd + eps) * (sr + eps);
        corr_sum += cov / den;

        // d(-ρ/np)/d r_j
        let g_cov = -1.0 / (np * den);
        let g_sr = cov / (np * den * (sr + eps));
        for i in &idx {
            let (p, r) = (provider.values[*i] - md, rendered.values[*i] - mr);
            let mut g = g_cov * p / n;
            if sr > 0.0 {
                g += g_sr * r / (n * sr);
            }
            d_rendered[*i] += g;
        }
    }
    Ok(DgcOutput {
        value: 1.0 - corr_sum / np,
        d_rendered,
        patches,
    })
}
