use crate::error::Result;
use crate::frame::Image;

/// Gaussian-window SSIM settings; constants assume unit dynamic range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: 1e-4,
            c2: 9e-4,
        }
    }
}

/// Mean absolute difference and its (sub)gradient with respect to `a`.
pub fn l1_loss(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    a.same_shape(b)?;
    let n = a.data.len().max(1) as f64;
    let mut sum = 0.0;
    let grad = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x - y;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, grad))
}

/// Mean SSIM over all pixels and channels.
pub fn ssim(a: &Image, b: &Image, params: &SsimParams) -> Result<f64> {
    Ok(ssim_with_grad(a, b, params, false)?.0)
}

/// `(1 − SSIM) / 2` and its gradient with respect to `a`.
pub fn dssim_loss(a: &Image, b: &Image, params: &SsimParams) -> Result<(f64, Vec<f64>)> {
    let (s, g) = ssim_with_grad(a, b, params, true)?;
    Ok(((1.0 - s) / 2.0, g.into_iter().map(|v| -0.5 * v).collect()))
}

/// `(1 − λ) L1 + λ D-SSIM` with `λ = lambda_dssim`.
pub fn rgb_loss(rendered: &Image, target: &Image, lambda_dssim: f64, params: &SsimParams) -> Result<(f64, Vec<f64>)> {
    let (l1, g1) = l1_loss(rendered, target)?;
    if lambda_dssim == 0.0 {
        return Ok((l1, g1));
    }
    let (ds, gs) = dssim_loss(rendered, target, params)?;
    let w = 1.0 - lambda_dssim;
    let grad = g1.iter().zip(&gs).map(|(a, b)| w * a + lambda_dssim * b).collect();
    Ok((w * l1 + lambda_dssim * ds, grad))
}

fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as f64;
    let mut taps: Vec<f64> = (0..window)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable same-size convolution with zero padding. The kernel is symmetric,
/// so this operator is its own adjoint.
fn blur(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xx = x as isize + k as isize - r as isize;
                if xx >= 0 && (xx as usize) < w {
                    acc += t * row[xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = y as isize + k as isize - r as isize;
                if yy >= 0 && (yy as usize) < h {
                    acc += t * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM and, optionally, its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image, params: &SsimParams, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    a.same_shape(b)?;
    let (w, h) = (a.width, a.height);
    let n_pix = w * h;
    let taps = gaussian_taps(params.window, params.sigma);
    let (c1, c2) = (params.c1, params.c2);
    let count = (n_pix * 3).max(1) as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; n_pix * 3] } else { Vec::new() };

    for ch in 0..3 {
        let x: Vec<f64> = (0..n_pix).map(|i| a.data[3 * i + ch]).collect();
        let y: Vec<f64> = (0..n_pix).map(|i| b.data[3 * i + ch]).collect();
        let sq = |v: &[f64]| v.iter().map(|t| t * t).collect::<Vec<_>>();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = blur(&x, w, h, &taps);
        let mu_y = blur(&y, w, h, &taps);
        let e_xx = blur(&sq(&x), w, h, &taps);
        let e_yy = blur(&sq(&y), w, h, &taps);
        let e_xy = blur(&xy, w, h, &taps);

        let mut d_mu = vec![0.0; if want_grad { n_pix } else { 0 }];
        let mut d_exx = d_mu.clone();
        let mut d_exy = d_mu.clone();
        for i in 0..n_pix {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cxy = e_xy[i] - mx * my;
            let n1 = 2.0 * mx * my + c1;
            let n2 = 2.0 * cxy + c2;
            let d1 = mx * mx + my * my + c1;
            let d2 = vx + vy + c2;
            let m = n1 * n2 / (d1 * d2);
            total += m;
            if want_grad {
                let dm_dmx = 2.0 * my * n2 / (d1 * d2) - m * 2.0 * mx / d1;
                let dm_dcxy = 2.0 * n1 / (d1 * d2);
                let dm_dvx = -m / d2;
                d_mu[i] = dm_dmx + dm_dvx * (-2.0 * mx) + dm_dcxy * (-my);
                d_exx[i] = dm_dvx;
                d_exy[i] = dm_dcxy;
            }
        }
        if want_grad {
            let b_mu = blur(&d_mu, w, h, &taps);
            let b_xx = blur(&d_exx, w, h, &taps);
            let b_xy = blur(&d_exy, w, h, &taps);
            for i in 0..n_pix {
                grad[3 * i + ch] = (b_mu[i] + 2.0 * x[i] * b_xx[i] + y[i] * b_xy[i]) / count;
            }
        }
    }
    Ok((total / count, grad))
}
