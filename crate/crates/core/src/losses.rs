//! Fitting losses with analytic gradients.
//!
//! * photometric: `MSE + λ_p · perceptual`, where the default perceptual term
//!   is `1 − mean SSIM` over up to three dyadic scales;
//! * geometric: `1 − Pearson(pred, gt)` over valid pixels;
//! * total variation: mean absolute horizontal plus mean absolute vertical
//!   forward difference;
//! * motion: `mean_j (λ_m‖Δx̂_j − Δx_j‖₂ + ‖Δx̂_j‖₁)`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::tensor::Image;

/// Default perceptual weight.
pub const LAMBDA_P: f64 = 0.5;
/// Default motion weight.
pub const LAMBDA_M: f64 = 2.0;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 3;
const SSIM_SCALES: usize = 3;
const DEGENERATE_VARIANCE: f64 = 1e-12;

/// A differentiable image dissimilarity in place of a learned perceptual
/// metric.
pub trait PerceptualMetric: Send + Sync {
    /// Dissimilarity of `x` to `y` and its gradient with respect to `x`.
    fn value_and_grad(&self, x: &Image, y: &Image) -> Result<(f64, Image)>;
}

/// `1 − mean SSIM` over dyadic scales, 3×3 uniform windows per channel.
#[derive(Clone, Copy, Debug)]
pub struct MultiScaleSsim {
    pub scales: usize,
}

impl Default for MultiScaleSsim {
    fn default() -> Self {
        Self {
            scales: SSIM_SCALES,
        }
    }
}

impl PerceptualMetric for MultiScaleSsim {
    fn value_and_grad(&self, x: &Image, y: &Image) -> Result<(f64, Image)> {
        x.ensure_same_shape(y, "perceptual inputs")?;
        let mut pyramid = vec![(x.clone(), y.clone())];
        while pyramid.len() < self.scales.max(1) {
            let (px, py) = pyramid.last().unwrap();
            if px.width / 2 < SSIM_WINDOW || px.height / 2 < SSIM_WINDOW {
                break;
            }
            let next = (px.downsample2(), py.downsample2());
            pyramid.push(next);
        }
        if x.width < SSIM_WINDOW || x.height < SSIM_WINDOW {
            return Err(Error::Shape(format!(
                "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels"
            )));
        }
        let n_scales = pyramid.len() as f64;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(pyramid.len());
        for (sx, sy) in &pyramid {
            let (v, g) = ssim_and_grad(sx, sy);
            total += v;
            grads.push(g);
        }
        // Pull the coarse-scale gradients back up through 2×2 average pooling.
        let mut grad = grads.pop().unwrap();
        while let Some(finer) = grads.pop() {
            let mut up = finer;
            for yy in 0..grad.height {
                for xx in 0..grad.width {
                    for c in 0..grad.channels {
                        let g = 0.25 * grad.get(xx, yy, c);
                        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                            let i = up.index(2 * xx + dx, 2 * yy + dy, c);
                            up.data[i] += g;
                        }
                    }
                }
            }
            grad = up;
        }
        for v in grad.data.iter_mut() {
            *v = -*v / n_scales;
        }
        Ok((1.0 - total / n_scales, grad))
    }
}

/// Mean SSIM over all valid 3×3 windows and channels, and its gradient with
/// respect to `x`.
fn ssim_and_grad(x: &Image, y: &Image) -> (f64, Image) {
    let (w, h, ch) = (x.width, x.height, x.channels);
    let nw = (w - SSIM_WINDOW + 1) * (h - SSIM_WINDOW + 1) * ch;
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut grad = Image::new(w, h, ch);
    let mut total = 0.0;
    for c in 0..ch {
        for wy in 0..=h - SSIM_WINDOW {
            for wx in 0..=w - SSIM_WINDOW {
                let pixels = || {
                    (wy..wy + SSIM_WINDOW).flat_map(move |py| (wx..wx + SSIM_WINDOW).map(move |px| (px, py)))
                };
                let mut mx = 0.0;
                let mut my = 0.0;
                for (px, py) in pixels() {
                    mx += x.get(px, py, c);
                    my += y.get(px, py, c);
                }
                mx /= n;
                my /= n;
                let mut vx = 0.0;
                let mut vy = 0.0;
                let mut cxy = 0.0;
                for (px, py) in pixels() {
                    let dx = x.get(px, py, c) - mx;
                    let dy = y.get(px, py, c) - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    cxy += dx * dy;
                }
                vx /= n;
                vy /= n;
                cxy /= n;
                let b1 = mx * mx + my * my + SSIM_C1;
                let b2 = vx + vy + SSIM_C2;
                let l = (2.0 * mx * my + SSIM_C1) / b1;
                let cs = (2.0 * cxy + SSIM_C2) / b2;
                total += l * cs;
                // Written so that it vanishes exactly when x == y.
                let common = cs * 2.0 * (my - l * mx) / b1;
                let k = 2.0 * l / b2;
                for (px, py) in pixels() {
                    let g = (common + k * ((y.get(px, py, c) - my) - cs * (x.get(px, py, c) - mx))) / n;
                    let i = grad.index(px, py, c);
                    grad.data[i] += g / nw as f64;
                }
            }
        }
    }
    (total / nw as f64, grad)
}

fn check_unit_range(img: &Image, what: &str) -> Result<()> {
    ensure_finite(&img.data, what)?;
    if img.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::RejectedInput(format!("{what} has values outside [0,1]")));
    }
    Ok(())
}

pub fn photometric_loss(rendered: &Image, target: &Image, lambda_p: f64) -> Result<f64> {
    Ok(photometric_loss_and_grad(rendered, target, lambda_p, &MultiScaleSsim::default())?.0)
}

/// Photometric loss and its gradient with respect to `rendered`. Rendered
/// values are not range checked: an optimizer may overshoot `[0,1]`.
pub fn photometric_loss_and_grad(
    rendered: &Image,
    target: &Image,
    lambda_p: f64,
    metric: &dyn PerceptualMetric,
) -> Result<(f64, Image)> {
    rendered.ensure_same_shape(target, "photometric inputs")?;
    ensure_finite(&rendered.data, "rendered image")?;
    check_unit_range(target, "target image")?;
    let n = rendered.data.len() as f64;
    let mut grad = Image::new(rendered.width, rendered.height, rendered.channels);
    let mut mse = 0.0;
    for ((g, r), t) in grad.data.iter_mut().zip(&rendered.data).zip(&target.data) {
        let d = r - t;
        mse += d * d;
        *g = 2.0 * d / n;
    }
    mse /= n;
    if lambda_p == 0.0 {
        return Ok((mse, grad));
    }
    let (p, pg) = metric.value_and_grad(rendered, target)?;
    for (g, v) in grad.data.iter_mut().zip(&pg.data) {
        *g += lambda_p * v;
    }
    Ok((mse + lambda_p * p, grad))
}

fn masked_moments(pred: &Image, gt: &Image, mask: &[bool]) -> Result<(f64, f64, f64, f64, f64, f64)> {
    if pred.channels != 1 || !pred.same_shape(gt) || mask.len() != pred.data.len() {
        return Err(Error::Shape("depth maps and mask must share one H×W shape".into()));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} valid depth pixels, need 2")));
    }
    let valid = || {
        pred.data
            .iter()
            .zip(&gt.data)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((p, g), _)| (*p, *g))
    };
    for (p, g) in valid() {
        if !(p.is_finite() && g.is_finite()) {
            return Err(Error::RejectedInput("non-finite depth in the valid mask".into()));
        }
    }
    let nf = n as f64;
    let mp = valid().map(|(p, _)| p).sum::<f64>() / nf;
    let mg = valid().map(|(_, g)| g).sum::<f64>() / nf;
    let (mut vp, mut vg, mut cov) = (0.0, 0.0, 0.0);
    for (p, g) in valid() {
        vp += (p - mp) * (p - mp);
        vg += (g - mg) * (g - mg);
        cov += (p - mp) * (g - mg);
    }
    Ok((nf, mp, mg, vp / nf, vg / nf, cov / nf))
}

pub fn geometric_loss(pred: &Image, gt: &Image, mask: &[bool]) -> Result<f64> {
    Ok(geometric_loss_and_grad(pred, gt, mask)?.0)
}

/// `1 − Pearson` and its gradient with respect to `pred`.
pub fn geometric_loss_and_grad(pred: &Image, gt: &Image, mask: &[bool]) -> Result<(f64, Image)> {
    let (n, mp, mg, vp, vg, cov) = masked_moments(pred, gt, mask)?;
    let mut grad = Image::new(pred.width, pred.height, 1);
    if vp < DEGENERATE_VARIANCE || vg < DEGENERATE_VARIANCE {
        return Ok((1.0, grad));
    }
    let denom = (vp * vg).sqrt();
    let r = cov / denom;
    for i in 0..pred.data.len() {
        if mask[i] {
            let dr = ((gt.data[i] - mg) / denom - r * (pred.data[i] - mp) / vp) / n;
            grad.data[i] = -dr;
        }
    }
    Ok((1.0 - r.clamp(-1.0, 1.0), grad))
}

pub fn tv_loss(depth: &Image) -> Result<f64> {
    Ok(tv_loss_and_grad(depth)?.0)
}

pub fn tv_loss_and_grad(depth: &Image) -> Result<(f64, Image)> {
    let (w, h) = (depth.width, depth.height);
    if depth.channels != 1 || w < 2 || h < 2 {
        return Err(Error::Shape(format!(
            "total variation needs a single-channel map of at least 2x2, got {w}x{h}x{}",
            depth.channels
        )));
    }
    ensure_finite(&depth.data, "depth")?;
    let nh = ((w - 1) * h) as f64;
    let nv = (w * (h - 1)) as f64;
    let mut grad = Image::new(w, h, 1);
    let (mut sh, mut sv) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = depth.get(x, y, 0);
            if x + 1 < w {
                let d = depth.get(x + 1, y, 0) - v;
                sh += d.abs();
                let s = sign(d) / nh;
                grad.data[y * w + x + 1] += s;
                grad.data[y * w + x] -= s;
            }
            if y + 1 < h {
                let d = depth.get(x, y + 1, 0) - v;
                sv += d.abs();
                let s = sign(d) / nv;
                grad.data[(y + 1) * w + x] += s;
                grad.data[y * w + x] -= s;
            }
        }
    }
    Ok((sh / nh + sv / nv, grad))
}

/// Subgradient of `|x|` with value 0 at the kink.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub point_id: usize,
    pub t_index: usize,
    pub gt: Vector3<f64>,
    pub pred: Vector3<f64>,
}

/// Tracked points with ground-truth and predicted displacements from the
/// canonical frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackSet {
    pub entries: Vec<TrackEntry>,
}

impl TrackSet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            ensure_finite(e.gt.as_slice(), "track displacement")?;
            ensure_finite(e.pred.as_slice(), "predicted displacement")?;
            if !seen.insert((e.t_index, e.point_id)) {
                return Err(Error::RejectedInput(format!(
                    "point {} appears twice at timestep {}",
                    e.point_id, e.t_index
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn motion_loss(tracks: &TrackSet, lambda_m: f64) -> Result<f64> {
    Ok(motion_loss_and_grad(tracks, lambda_m)?.0)
}

/// Motion loss and its gradient with respect to each entry's prediction.
pub fn motion_loss_and_grad(tracks: &TrackSet, lambda_m: f64) -> Result<(f64, Vec<Vector3<f64>>)> {
    if tracks.is_empty() {
        return Err(Error::InsufficientData("empty track set".into()));
    }
    tracks.validate()?;
    let n = tracks.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(tracks.len());
    for e in &tracks.entries {
        let err = e.pred - e.gt;
        let l2 = err.norm();
        let l1 = e.pred.abs().sum();
        total += lambda_m * l2 + l1;
        let g_l2 = if l2 > 0.0 { err * (lambda_m / l2) } else { Vector3::zeros() };
        grads.push((g_l2 + e.pred.map(sign)) / n);
    }
    Ok((total / n, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_m: f64,
    pub geometric: f64,
    pub tv: f64,
    /// Gate for the motion term; zero outside the dynamic stage.
    pub motion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: LAMBDA_P,
            lambda_m: LAMBDA_M,
            geometric: 0.1,
            tv: 0.01,
            motion: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub photometric: f64,
    pub geometric: f64,
    pub tv: f64,
    pub motion: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn new(photometric: f64, geometric: f64, tv: f64, motion: f64, weights: LossWeights) -> Self {
        let total = photometric + weights.geometric * geometric + weights.tv * tv + weights.motion * motion;
        Self {
            photometric,
            geometric,
            tv,
            motion,
            total,
            weights,
        }
    }
}
