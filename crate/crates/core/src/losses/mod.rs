//! Training objectives and their gradients with respect to rendered quantities.
//!
//! - photometric: L1, D-SSIM and their blend;
//! - projection consistency: mean match displacement versus the displacement
//!   predicted by re-projecting rendered depth between poses;
//! - depth correlation: one minus the mean patchwise Pearson correlation of
//!   provider and rendered depth;
//! - the weighted total.

mod geometric;
mod photometric;

use serde::{Deserialize, Serialize};

pub use geometric::{depth_mask, dgc_loss, pgc_loss, DgcOutput, PgcOutput};
pub use photometric::{dssim_loss, l1_loss, rgb_loss, ssim, ssim_with_grad, SsimParams};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgcMode {
    /// `|mean ‖δs‖ − mean ‖δŝ‖|`
    #[default]
    Mean,
    /// `mean |‖δs_i‖ − ‖δŝ_i‖|`
    PerMatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the photometric term in the total loss.
    pub lambda_rgb: f64,
    /// D-SSIM share inside the photometric term.
    pub lambda_dssim: f64,
    pub lambda_pgc: f64,
    pub lambda_dgc: f64,
    pub dgc_patch_size: usize,
    pub dgc_patch_count: usize,
    pub pearson_eps: f64,
    /// Rendered depth above `k × median` is masked out.
    pub depth_clamp_k: f64,
    /// Matches with lower confidence are discarded.
    pub confidence_min: f64,
    pub pgc_mode: PgcMode,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_rgb: 1.0,
            lambda_dssim: 0.2,
            lambda_pgc: 0.05,
            lambda_dgc: 0.1,
            dgc_patch_size: 16,
            dgc_patch_count: 32,
            pearson_eps: 1e-6,
            depth_clamp_k: 10.0,
            confidence_min: 0.2,
            pgc_mode: PgcMode::Mean,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_rgb, self.lambda_dssim, self.lambda_pgc, self.lambda_dgc];
        if weights.iter().any(|w| !(*w >= 0.0)) || self.lambda_dssim > 1.0 {
            return Err(Error::Config("loss weights must be non-negative (dssim share <= 1)".into()));
        }
        if self.dgc_patch_size < 2 || self.dgc_patch_count == 0 {
            return Err(Error::Config("dgc patches need size >= 2 and count >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_min) {
            return Err(Error::Config("confidence_min must lie in [0, 1]".into()));
        }
        if !(self.depth_clamp_k > 0.0) || !(self.pearson_eps >= 0.0) {
            return Err(Error::Config("depth_clamp_k must be positive and pearson_eps non-negative".into()));
        }
        if self.ssim_window == 0 || self.ssim_window % 2 == 0 || !(self.ssim_sigma > 0.0) {
            return Err(Error::Config("ssim window must be odd with positive sigma".into()));
        }
        Ok(())
    }

    pub fn ssim_params(&self) -> SsimParams {
        SsimParams {
            window: self.ssim_window,
            sigma: self.ssim_sigma,
            c1: self.ssim_c1,
            c2: self.ssim_c2,
        }
    }
}

/// One correspondence between consecutive frames, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub u_prev: f64,
    pub v_prev: f64,
    pub u_cur: f64,
    pub v_cur: f64,
    pub confidence: f64,
}

impl Match {
    pub fn displacement(&self) -> f64 {
        (self.u_cur - self.u_prev).hypot(self.v_cur - self.v_prev)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn new(matches: Vec<Match>) -> Self {
        Self { matches }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Checks bounds and confidence range.
    pub fn validate(&self, width: usize, height: usize) -> std::result::Result<(), String> {
        let (w, h) = (width as f64, height as f64);
        for (i, m) in self.matches.iter().enumerate() {
            let inside = |u: f64, v: f64| u >= -0.5 && u < w - 0.5 && v >= -0.5 && v < h - 0.5;
            if !inside(m.u_prev, m.v_prev) || !inside(m.u_cur, m.v_cur) {
                return Err(format!("match {i} lies outside the {width}x{height} image"));
            }
            if !(0.0..=1.0).contains(&m.confidence) {
                return Err(format!("match {i} has confidence {} outside [0, 1]", m.confidence));
            }
        }
        Ok(())
    }
}

/// Component values with their gradients; empty gradient vectors mean the
/// component is absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub rgb: f64,
    pub pgc: f64,
    pub dgc: f64,
    /// d L_rgb / d rendered color of the supervised frame.
    pub d_color: Vec<f64>,
    /// d L_dgc / d rendered depth of the supervised frame.
    pub d_depth_cur: Vec<f64>,
    /// d L_pgc / d rendered depth of the previous frame.
    pub d_depth_prev: Vec<f64>,
    /// d L_pgc / d current pose (tangent).
    pub d_pose_cur: [f64; 6],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub d_color: Vec<f64>,
    pub d_depth_cur: Vec<f64>,
    pub d_depth_prev: Vec<f64>,
    pub d_pose_cur: [f64; 6],
}

/// `λ_rgb L_rgb + λ_pgc L_pgc + λ_dgc L_dgc`, gradients weighted alike.
pub fn total_loss(c: &LossComponents, cfg: &LossConfig) -> Result<TotalLoss> {
    for (name, v) in [("rgb", c.rgb), ("pgc", c.pgc), ("dgc", c.dgc)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    let scale = |v: &[f64], w: f64| v.iter().map(|g| g * w).collect::<Vec<_>>();
    let mut d_pose_cur = [0.0; 6];
    for (d, g) in d_pose_cur.iter_mut().zip(&c.d_pose_cur) {
        *d = cfg.lambda_pgc * g;
    }
    Ok(TotalLoss {
        value: cfg.lambda_rgb * c.rgb + cfg.lambda_pgc * c.pgc + cfg.lambda_dgc * c.dgc,
        d_color: scale(&c.d_color, cfg.lambda_rgb),
        d_depth_cur: scale(&c.d_depth_cur, cfg.lambda_dgc),
        d_depth_prev: scale(&c.d_depth_prev, cfg.lambda_pgc),
        d_pose_cur,
    })
}
