//! Image quality (PSNR, SSIM) and trajectory accuracy (ATE, RPE).
//!
//! Trajectory metrics take camera-to-world poses, so translations are camera
//! centers.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Image;
use crate::geometry::Pose;
use crate::io::TumEntry;
use crate::losses::{ssim, SsimParams};

pub const PSNR_CAP: f64 = 100.0;

/// `10 log10(1 / MSE)` for unit-range images, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.data.len().max(1) as f64;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM with the same Gaussian window as the training loss.
pub fn ssim_metric(a: &Image, b: &Image) -> Result<f64> {
    ssim(a, b, &SsimParams::default())
}

/// Predicted and ground-truth camera-to-world poses for the same frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPair {
    pub predicted: Vec<Pose>,
    pub ground_truth: Vec<Pose>,
}

impl TrajectoryPair {
    pub fn new(predicted: Vec<Pose>, ground_truth: Vec<Pose>) -> Result<Self> {
        if predicted.len() != ground_truth.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} ground-truth poses", predicted.len()),
                found: ground_truth.len().to_string(),
            });
        }
        Ok(Self {
            predicted,
            ground_truth,
        })
    }

    /// Pairs entries with equal timestamps; predicted entries without a
    /// ground-truth partner are dropped.
    pub fn from_entries(predicted: &[TumEntry], ground_truth: &[TumEntry]) -> Self {
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for p in predicted {
            if let Some(g) = ground_truth.iter().find(|g| (g.timestamp - p.timestamp).abs() < 1e-6) {
                pred.push(p.camera_to_world);
                gt.push(g.camera_to_world);
            }
        }
        Self {
            predicted: pred,
            ground_truth: gt,
        }
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }
}

/// Similarity (or rigid) transform `x ↦ s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Alignment {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }
}

/// Least-squares alignment of `src` onto `dst` (Umeyama); scale is fixed to 1
/// unless `with_scale`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<Alignment> {
    let n = src.len();
    if n == 0 || n != dst.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} non-empty point pairs", n),
            found: dst.len().to_string(),
        });
    }
    let inv = 1.0 / n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() * inv;
    let mu_d = dst.iter().sum::<Vector3<f64>>() * inv;
    if n == 1 {
        return Ok(Alignment {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: mu_d - mu_s,
        });
    }
    let var_s = src.iter().map(|p| (p - mu_s).norm_squared()).sum::<f64>() * inv;
    let var_d = dst.iter().map(|p| (p - mu_d).norm_squared()).sum::<f64>() * inv;
    if var_s < 1e-20 || var_d < 1e-20 {
        return Err(Error::DegenerateAlignment);
    }
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    cov *= inv;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.ok_or(Error::DegenerateAlignment)?, svd.v_t.ok_or(Error::DegenerateAlignment)?);
    let mut d = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * vt;
    let scale = if with_scale {
        (svd.singular_values.component_mul(&d.diagonal())).sum() / var_s
    } else {
        1.0
    };
    Ok(Alignment {
        scale,
        rotation,
        translation: mu_d - scale * rotation * mu_s,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    /// RMSE of aligned camera centers, ground-truth units.
    pub rmse: f64,
    pub scale: f64,
}

/// Absolute trajectory error after aligning predicted camera centers onto
/// ground truth.
pub fn ate(pair: &TrajectoryPair, align_scale: bool) -> Result<AteResult> {
    let src: Vec<Vector3<f64>> = pair.predicted.iter().map(|p| p.translation).collect();
    let dst: Vec<Vector3<f64>> = pair.ground_truth.iter().map(|p| p.translation).collect();
    let a = umeyama(&src, &dst, align_scale)?;
    let sq = src.iter().zip(&dst).map(|(s, d)| (a.apply(s) - d).norm_squared()).sum::<f64>();
    Ok(AteResult {
        rmse: (sq / src.len() as f64).sqrt(),
        scale: a.scale,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpeResult {
    /// RMSE of relative translation error, ground-truth units.
    pub trans: f64,
    /// RMSE of relative rotation error, degrees.
    pub rot_deg: f64,
}

/// Relative pose error over steps of `delta` frames.
pub fn rpe(pair: &TrajectoryPair, delta: usize) -> Result<RpeResult> {
    let n = pair.len();
    if delta == 0 || n <= delta {
        return Err(Error::TooShort { len: n, delta });
    }
    let (p, q) = (&pair.predicted, &pair.ground_truth);
    let (mut st, mut sr) = (0.0, 0.0);
    let m = n - delta;
    for i in 0..m {
        let rel_p = p[i].inverse().compose(&p[i + delta]);
        let rel_q = q[i].inverse().compose(&q[i + delta]);
        let e = rel_q.inverse().compose(&rel_p);
        st += e.translation.norm_squared();
        sr += e.rotation.angle().to_degrees().powi(2);
    }
    Ok(RpeResult {
        trans: (st / m as f64).sqrt(),
        rot_deg: (sr / m as f64).sqrt(),
    })
}

/// Largest distance between any two camera centers.
pub fn trajectory_extent(camera_to_world: &[Pose]) -> f64 {
    let mut best = 0.0_f64;
    for (i, a) in camera_to_world.iter().enumerate() {
        for b in &camera_to_world[i + 1..] {
            best = best.max((a.translation - b.translation).norm());
        }
    }
    best
}
