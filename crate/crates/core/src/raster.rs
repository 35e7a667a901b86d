//! Tile-based differentiable splatting.
//!
//! Each primitive is projected with the EWA approximation
//! `Σ₂D = J·W·Σ·Wᵀ·Jᵀ + 0.3·I`, sorted by view depth (ties by index) and
//! composited front to back inside 16×16 tiles. Contributions outside the
//! 3σ ellipse or below 1/255 are skipped.
//!
//! The backward pass never divides by transmittance. For a pixel with
//! upstream cotangent `g` each splat carries the scalar
//! `s_i = g_c·c_i + g_d·z_i + g_a` and the background `s_bg = g_c·bg`; with
//! `B_N = s_bg` and `B_i = α_i s_i + (1 − α_i) B_{i+1}` the composited
//! adjoint is `∂L/∂α_i = T_i (s_i − B_{i+1})`. Per-tile gradient buffers are
//! merged in tile order, so results do not depend on the thread count.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{ensure_finite, Error, Result};
use crate::gaussian::{
    hamilton_jacobians, normalize_vjp, rotation_vjp, sigmoid, GaussianField, GaussianPrimitive, Quat,
    DEFORM_DIM, GEOMETRY_DIM,
};
use crate::tensor::Image;

pub const TILE_SIZE: usize = 16;
pub const NEAR_PLANE: f64 = 1e-3;
/// Low-pass dilation added to the diagonal of every screen covariance.
pub const DILATION: f64 = 0.3;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Squared Mahalanobis radius of the 3σ footprint.
const FOOTPRINT: f64 = 9.0;
pub(crate) const SH_C1: f64 = 0.4886025119029199;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// `H×W×3`.
    pub color: Image,
    /// `H×W`, alpha-weighted expected view depth.
    pub depth: Image,
    /// `H×W`, `1 − T_final`.
    pub alpha: Image,
}

/// Upstream gradients of a scalar loss with respect to a [`RenderOutput`].
#[derive(Clone, Debug, PartialEq)]
pub struct RenderCotangents {
    pub color: Image,
    pub depth: Image,
    pub alpha: Image,
}

impl RenderCotangents {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: Image::new(width, height, 3),
            depth: Image::new(width, height, 1),
            alpha: Image::new(width, height, 1),
        }
    }

    fn check(&self, width: usize, height: usize) -> Result<()> {
        let dims = [
            (&self.color, 3, "color"),
            (&self.depth, 1, "depth"),
            (&self.alpha, 1, "alpha"),
        ];
        for (img, c, what) in dims {
            if img.width != width || img.height != height || img.channels != c {
                return Err(Error::Shape(format!(
                    "{what} cotangent is {}x{}x{}, expected {width}x{height}x{c}",
                    img.width, img.height, img.channels
                )));
            }
            ensure_finite(&img.data, what)?;
        }
        Ok(())
    }
}

/// Gradients with respect to the canonical primitives and, for dynamic
/// fields, the deformation deltas of the rendered timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    pub mu: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub quat: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vec<f64>>,
    pub deltas: Option<DeltaGradients>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaGradients {
    pub d_mu: Vec<Vector3<f64>>,
    pub d_quat: Vec<[f64; 4]>,
    pub d_log_scale: Vec<Vector3<f64>>,
}

impl RenderGradients {
    pub fn zeros(count: usize, color_dim: usize) -> Self {
        Self {
            mu: vec![Vector3::zeros(); count],
            log_scale: vec![Vector3::zeros(); count],
            quat: vec![[0.0; 4]; count],
            opacity_logit: vec![0.0; count],
            color: vec![vec![0.0; color_dim]; count],
            deltas: None,
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Gradient rows in [`GaussianPrimitive::to_row`] order, concatenated.
    pub fn canonical_rows(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            out.extend_from_slice(self.mu[i].as_slice());
            out.extend_from_slice(self.log_scale[i].as_slice());
            out.extend_from_slice(&self.quat[i]);
            out.push(self.opacity_logit[i]);
            out.extend_from_slice(&self.color[i]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        let canon = self.canonical_rows().iter().all(|v| v.is_finite());
        canon && self.deltas.as_ref().is_none_or(|d| d.rows().iter().all(|v| v.is_finite()))
    }
}

impl DeltaGradients {
    /// Gradient rows in [`DeformationDelta::to_row`](crate::gaussian::DeformationDelta::to_row)
    /// order, concatenated.
    pub fn rows(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.d_mu.len() * DEFORM_DIM);
        for i in 0..self.d_mu.len() {
            out.extend_from_slice(self.d_mu[i].as_slice());
            out.extend_from_slice(&self.d_quat[i]);
            out.extend_from_slice(self.d_log_scale[i].as_slice());
        }
        out
    }
}

/// A primitive after projection into the image.
#[derive(Clone, Debug)]
struct Splat {
    index: usize,
    view: Vector3<f64>,
    mean: Vector2<f64>,
    /// Inverse screen covariance as `(a, b, c)` of `[[a, b], [b, c]]`.
    conic: [f64; 3],
    jac: Matrix2x3<f64>,
    /// `W·Σ·Wᵀ`.
    cov_view: Matrix3<f64>,
    rot: Matrix3<f64>,
    var: Vector3<f64>,
    opacity: f64,
    rgb: [f64; 3],
    /// `μ − camera center`, for view-dependent color.
    view_dir: Vector3<f64>,
    tiles: [usize; 4],
}

/// Per-splat gradients with respect to the screen-space quantities.
#[derive(Clone, Copy, Debug, Default)]
struct ScreenGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    rgb: [f64; 3],
    depth: f64,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.rgb[k] += o.rgb[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

#[derive(Clone, Copy)]
struct Contribution {
    /// Position in the composited list.
    pos: usize,
    slot: usize,
    alpha: f64,
    transmittance: f64,
    dx: f64,
    dy: f64,
    gauss: f64,
}

/// Ordered primitive indices that contributed to each pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveSet {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Vec<u32>>,
}

/// Forward state kept for the backward pass.
pub struct RenderPass<'a> {
    prims: &'a [GaussianPrimitive],
    cam: Camera,
    background: [f64; 3],
    splats: Vec<Splat>,
    tiles_x: usize,
    tiles_y: usize,
    /// Per-tile splat slots in compositing order.
    tile_lists: Vec<Vec<usize>>,
    output: RenderOutput,
}

pub fn render(prims: &[GaussianPrimitive], cam: &Camera, background: [f64; 3]) -> Result<RenderOutput> {
    Ok(RenderPass::new(prims, cam, background)?.output)
}

/// Renders timestep `t_index` of `field` and returns the gradients of
/// `⟨upstream, output⟩`.
pub fn render_with_grad(
    field: &GaussianField,
    t_index: usize,
    cam: &Camera,
    background: [f64; 3],
    upstream: &RenderCotangents,
) -> Result<(RenderOutput, RenderGradients)> {
    let prims = crate::gaussian::deform(field, t_index)?;
    let pass = RenderPass::new(&prims, cam, background)?;
    let grads = pass.backward(upstream)?;
    let grads = deform_backward(field, t_index, grads)?;
    Ok((pass.output, grads))
}

fn validate_primitives(prims: &[GaussianPrimitive]) -> Result<()> {
    let c = prims.first().map_or(3, |p| p.color.len());
    for (i, p) in prims.iter().enumerate() {
        p.check_finite()?;
        if p.color.len() != c || (c != 3 && c != 12) {
            return Err(Error::Shape(format!(
                "primitive {i} has {} color coefficients",
                p.color.len()
            )));
        }
        if p.quat.norm() == 0.0 {
            return Err(Error::RejectedInput(format!("primitive {i} has a zero quaternion")));
        }
    }
    Ok(())
}

fn project(index: usize, p: &GaussianPrimitive, cam: &Camera, campos: &Vector3<f64>) -> Option<Splat> {
    let w = &cam.world_to_cam.rotation;
    let view = cam.world_to_cam.apply(&p.mu);
    if view.z <= NEAR_PLANE {
        return None;
    }
    let (x, y, z) = (view.x, view.y, view.z);
    let jac = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    );
    let rot = p.quat.to_rotation();
    let var = p.log_scale.map(|s| (2.0 * s).exp());
    let cov = rot * Matrix3::from_diagonal(&var) * rot.transpose();
    let cov = (cov + cov.transpose()) * 0.5;
    let cov_view = w * cov * w.transpose();
    let s = jac * cov_view * jac.transpose();
    let (s00, s01, s11) = (s[(0, 0)] + DILATION, 0.5 * (s[(0, 1)] + s[(1, 0)]), s[(1, 1)] + DILATION);
    let det = s00 * s11 - s01 * s01;
    if !(det > 0.0) {
        return None;
    }
    let conic = [s11 / det, -s01 / det, s00 / det];
    let mean = Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);

    // Pixel centers sit at i + 0.5; the 3σ ellipse spans ±3√S₀₀ by ±3√S₁₁.
    let rx = 3.0 * s00.sqrt();
    let ry = 3.0 * s11.sqrt();
    let x0 = (mean.x - rx - 0.5).ceil().max(0.0);
    let x1 = (mean.x + rx - 0.5).floor().min(cam.width as f64 - 1.0);
    let y0 = (mean.y - ry - 0.5).ceil().max(0.0);
    let y1 = (mean.y + ry - 0.5).floor().min(cam.height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    let tiles = [
        x0 as usize / TILE_SIZE,
        x1 as usize / TILE_SIZE,
        y0 as usize / TILE_SIZE,
        y1 as usize / TILE_SIZE,
    ];

    let view_dir = p.mu - campos;
    let rgb = shade(&p.color, &view_dir);
    Some(Splat {
        index,
        view,
        mean,
        conic,
        jac,
        cov_view,
        rot,
        var,
        opacity: sigmoid(p.opacity_logit),
        rgb,
        view_dir,
        tiles,
    })
}

/// Band-0 color plus the degree-1 spherical-harmonic term.
fn shade(color: &[f64], view_dir: &Vector3<f64>) -> [f64; 3] {
    let mut rgb = [color[0], color[1], color[2]];
    if color.len() == 12 {
        let u = view_dir.normalize();
        for (ch, v) in rgb.iter_mut().enumerate() {
            *v += SH_C1 * (-u.y * color[3 + ch] + u.z * color[6 + ch] - u.x * color[9 + ch]);
        }
    }
    rgb
}

impl<'a> RenderPass<'a> {
    pub fn new(prims: &'a [GaussianPrimitive], cam: &Camera, background: [f64; 3]) -> Result<Self> {
        cam.validate()?;
        ensure_finite(&background, "background")?;
        validate_primitives(prims)?;
        let campos = cam.center();
        let mut splats: Vec<Splat> = prims
            .par_iter()
            .enumerate()
            .filter_map(|(i, p)| project(i, p, cam, &campos))
            .collect();
        splats.sort_by(|a, b| a.view.z.total_cmp(&b.view.z).then(a.index.cmp(&b.index)));

        let tiles_x = cam.width.div_ceil(TILE_SIZE);
        let tiles_y = cam.height.div_ceil(TILE_SIZE);
        let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
        for (slot, s) in splats.iter().enumerate() {
            for ty in s.tiles[2]..=s.tiles[3] {
                for tx in s.tiles[0]..=s.tiles[1] {
                    tile_lists[ty * tiles_x + tx].push(slot);
                }
            }
        }

        let mut pass = Self {
            prims,
            cam: cam.clone(),
            background,
            splats,
            tiles_x,
            tiles_y,
            tile_lists,
            output: RenderOutput {
                color: Image::new(cam.width, cam.height, 3),
                depth: Image::new(cam.width, cam.height, 1),
                alpha: Image::new(cam.width, cam.height, 1),
            },
        };
        let tiles: Vec<Vec<[f64; 5]>> = (0..tiles_x * tiles_y)
            .into_par_iter()
            .map(|tile| {
                let mut scratch = Vec::new();
                pass.tile_pixels(tile)
                    .map(|(px, py)| pass.shade_pixel(px, py, &pass.tile_lists[tile], true, &mut scratch))
                    .collect()
            })
            .collect();
        for (tile, values) in tiles.into_iter().enumerate() {
            for ((px, py), v) in pass.tile_pixels(tile).zip(values) {
                pass.store(px, py, v);
            }
        }
        Ok(pass)
    }

    pub fn output(&self) -> &RenderOutput {
        &self.output
    }

    pub fn into_output(self) -> RenderOutput {
        self.output
    }

    fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let x1 = (x0 + TILE_SIZE).min(self.cam.width);
        let y1 = (y0 + TILE_SIZE).min(self.cam.height);
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }

    fn store(&mut self, px: usize, py: usize, v: [f64; 5]) {
        for c in 0..3 {
            self.output.color.set(px, py, c, v[c]);
        }
        self.output.depth.set(px, py, 0, v[3]);
        self.output.alpha.set(px, py, 0, v[4]);
    }

    /// Composites the splats in `slots` at one pixel. With `cutoffs` the
    /// footprint and minimum-alpha tests apply; every contribution is
    /// recorded in `contribs`.
    fn shade_pixel(
        &self,
        px: usize,
        py: usize,
        slots: &[usize],
        cutoffs: bool,
        contribs: &mut Vec<Contribution>,
    ) -> [f64; 5] {
        contribs.clear();
        let (u, v) = (px as f64 + 0.5, py as f64 + 0.5);
        let mut t = 1.0;
        let mut acc = [0.0; 5];
        for (pos, &slot) in slots.iter().enumerate() {
            let s = &self.splats[slot];
            let dx = u - s.mean.x;
            let dy = v - s.mean.y;
            let [a, b, c] = s.conic;
            let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
            if cutoffs && q > FOOTPRINT {
                continue;
            }
            let gauss = (-0.5 * q).exp();
            let alpha = s.opacity * gauss;
            if cutoffs && alpha < MIN_ALPHA {
                continue;
            }
            let w = t * alpha;
            for ch in 0..3 {
                acc[ch] += w * s.rgb[ch];
            }
            acc[3] += w * s.view.z;
            contribs.push(Contribution {
                pos,
                slot,
                alpha,
                transmittance: t,
                dx,
                dy,
                gauss,
            });
            t *= 1.0 - alpha;
        }
        for ch in 0..3 {
            acc[ch] += t * self.background[ch];
        }
        acc[4] = 1.0 - t;
        acc
    }

    /// Primitive indices that contributed to each pixel, in order.
    pub fn active_set(&self) -> ActiveSet {
        let (w, h) = (self.cam.width, self.cam.height);
        let mut pixels = vec![Vec::new(); w * h];
        let mut scratch = Vec::new();
        for tile in 0..self.tile_lists.len() {
            for (px, py) in self.tile_pixels(tile) {
                self.shade_pixel(px, py, &self.tile_lists[tile], true, &mut scratch);
                pixels[py * w + px] = scratch.iter().map(|c| self.splats[c.slot].index as u32).collect();
            }
        }
        ActiveSet {
            width: w,
            height: h,
            pixels,
        }
    }

    /// Gradients of `⟨upstream, output⟩` with respect to the rendered
    /// primitives (no deformation chain).
    pub fn backward(&self, upstream: &RenderCotangents) -> Result<RenderGradients> {
        upstream.check(self.cam.width, self.cam.height)?;
        let per_tile: Vec<Vec<ScreenGrad>> = (0..self.tiles_x * self.tiles_y)
            .into_par_iter()
            .map(|tile| {
                let list = &self.tile_lists[tile];
                let mut local = vec![ScreenGrad::default(); list.len()];
                let mut contribs = Vec::new();
                for (px, py) in self.tile_pixels(tile) {
                    self.shade_pixel(px, py, list, true, &mut contribs);
                    self.backward_pixel(px, py, upstream, &contribs, |pos, g| local[pos].add(g));
                }
                local
            })
            .collect();

        let mut screen = vec![ScreenGrad::default(); self.splats.len()];
        for (tile, local) in per_tile.iter().enumerate() {
            for (k, g) in local.iter().enumerate() {
                screen[self.tile_lists[tile][k]].add(g);
            }
        }
        Ok(self.chain_to_primitives(&screen))
    }

    fn backward_pixel(
        &self,
        px: usize,
        py: usize,
        upstream: &RenderCotangents,
        contribs: &[Contribution],
        mut sink: impl FnMut(usize, &ScreenGrad),
    ) {
        let gc = [
            upstream.color.get(px, py, 0),
            upstream.color.get(px, py, 1),
            upstream.color.get(px, py, 2),
        ];
        let gd = upstream.depth.get(px, py, 0);
        let ga = upstream.alpha.get(px, py, 0);
        let mut tail: f64 = (0..3).map(|c| gc[c] * self.background[c]).sum();
        for c in contribs.iter().rev() {
            let s = &self.splats[c.slot];
            let value: f64 = (0..3).map(|k| gc[k] * s.rgb[k]).sum::<f64>() + gd * s.view.z + ga;
            let w = c.transmittance * c.alpha;
            let d_alpha = c.transmittance * (value - tail);
            tail = c.alpha * value + (1.0 - c.alpha) * tail;

            let d_q = d_alpha * (-0.5 * c.alpha);
            let [a, b, cc] = s.conic;
            let g = ScreenGrad {
                // q depends on the mean through d = pixel − mean.
                mean: [
                    -2.0 * d_q * (a * c.dx + b * c.dy),
                    -2.0 * d_q * (b * c.dx + cc * c.dy),
                ],
                conic: [d_q * c.dx * c.dx, 2.0 * d_q * c.dx * c.dy, d_q * c.dy * c.dy],
                opacity: d_alpha * c.gauss,
                rgb: [w * gc[0], w * gc[1], w * gc[2]],
                depth: w * gd,
            };
            sink(c.pos, &g);
        }
    }

    fn chain_to_primitives(&self, screen: &[ScreenGrad]) -> RenderGradients {
        let color_dim = self.prims.first().map_or(3, |p| p.color.len());
        let mut out = RenderGradients::zeros(self.prims.len(), color_dim);
        let w = &self.cam.world_to_cam.rotation;
        let (fx, fy) = (self.cam.fx, self.cam.fy);
        for (s, g) in self.splats.iter().zip(screen) {
            let p = &self.prims[s.index];
            let [a, b, c] = s.conic;
            let conic = Matrix2::new(a, b, b, c);
            let g_conic = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
            let g_cov2 = -(conic * g_conic * conic);
            let g_cov_view = s.jac.transpose() * g_cov2 * s.jac;
            let g_jac = 2.0 * g_cov2 * s.jac * s.cov_view;

            let (x, y, z) = (s.view.x, s.view.y, s.view.z);
            let mut g_view = s.jac.transpose() * Vector2::new(g.mean[0], g.mean[1]);
            g_view.z += g.depth;
            let z2 = z * z;
            let z3 = z2 * z;
            g_view.x += g_jac[(0, 2)] * (-fx / z2);
            g_view.y += g_jac[(1, 2)] * (-fy / z2);
            g_view.z += g_jac[(0, 0)] * (-fx / z2)
                + g_jac[(0, 2)] * (2.0 * fx * x / z3)
                + g_jac[(1, 1)] * (-fy / z2)
                + g_jac[(1, 2)] * (2.0 * fy * y / z3);
            let mut g_mu = w.transpose() * g_view;

            let g_cov = w.transpose() * g_cov_view * w;
            let g_cov = (g_cov + g_cov.transpose()) * 0.5;
            let g_rot = 2.0 * g_cov * s.rot * Matrix3::from_diagonal(&s.var);
            let local = s.rot.transpose() * g_cov * s.rot;
            out.log_scale[s.index] = Vector3::from_fn(|k, _| 2.0 * s.var[k] * local[(k, k)]);
            out.quat[s.index] = rotation_vjp(&p.quat, &g_rot);
            out.opacity_logit[s.index] = g.opacity * s.opacity * (1.0 - s.opacity);

            let colors = &mut out.color[s.index];
            colors[..3].copy_from_slice(&g.rgb);
            if color_dim == 12 {
                let norm = s.view_dir.norm();
                let u = s.view_dir / norm;
                let mut g_u = Vector3::zeros();
                for ch in 0..3 {
                    colors[3 + ch] = -SH_C1 * u.y * g.rgb[ch];
                    colors[6 + ch] = SH_C1 * u.z * g.rgb[ch];
                    colors[9 + ch] = -SH_C1 * u.x * g.rgb[ch];
                    g_u.x -= SH_C1 * p.color[9 + ch] * g.rgb[ch];
                    g_u.y -= SH_C1 * p.color[3 + ch] * g.rgb[ch];
                    g_u.z += SH_C1 * p.color[6 + ch] * g.rgb[ch];
                }
                g_mu += (g_u - u * u.dot(&g_u)) / norm;
            }
            out.mu[s.index] = g_mu;
        }
        out
    }
}

/// Pulls gradients with respect to the deformed primitives of `t_index` back
/// to the canonical primitives and the deltas of that timestep.
pub fn deform_backward(field: &GaussianField, t_index: usize, grads: RenderGradients) -> Result<RenderGradients> {
    if field.is_static() {
        if t_index >= field.frame_count() {
            return Err(Error::Range(format!("timestep {t_index} on a static field")));
        }
        return Ok(grads);
    }
    let row = field
        .tracks
        .get(t_index)
        .ok_or_else(|| Error::Range(format!("timestep {t_index} outside 0..{}", field.tracks.len())))?;
    if grads.len() != field.len() {
        return Err(Error::Shape(format!(
            "{} gradient rows for {} primitives",
            grads.len(),
            field.len()
        )));
    }
    let mut out = grads;
    let mut d_quat = Vec::with_capacity(row.len());
    for (i, (p, d)) in field.canonical.iter().zip(row).enumerate() {
        // The deformed quaternion is normalize(q ⊗ Δq) and the rotation only
        // sees its direction, so the gradient with respect to the deformed
        // unit quaternion is already tangent; pull it through the product.
        let h = p.quat.hamilton(&d.d_quat);
        let unit = h.normalized()?;
        // The identity delta skips renormalization in the forward pass.
        let scale = if d.d_quat == Quat::IDENTITY { p.quat.norm() } else { 1.0 };
        let g_unit = project_tangent(&unit, out.quat[i].map(|v| v * scale));
        let g_h = normalize_vjp(&h, g_unit);
        let (ja, jb) = hamilton_jacobians(&p.quat, &d.d_quat);
        let g = nalgebra::Vector4::from(g_h);
        let gq = ja.transpose() * g;
        let gd = jb.transpose() * g;
        out.quat[i] = [gq[0], gq[1], gq[2], gq[3]];
        d_quat.push([gd[0], gd[1], gd[2], gd[3]]);
    }
    out.deltas = Some(DeltaGradients {
        d_mu: out.mu.clone(),
        d_quat,
        d_log_scale: out.log_scale.clone(),
    });
    Ok(out)
}

/// Gradient `g` with respect to a unit quaternion restricted to the tangent
/// space (the radial part does not change the rotation).
fn project_tangent(unit: &Quat, g: [f64; 4]) -> [f64; 4] {
    let dot: f64 = (0..4).map(|i| unit.0[i] * g[i]).sum();
    std::array::from_fn(|i| g[i] - unit.0[i] * dot)
}

/// Composites exactly the listed primitives at each pixel, in the listed
/// order and without footprint or minimum-alpha cutoffs. Used to verify
/// gradients by finite differences when a perturbation would change which
/// splats pass the cutoffs.
pub fn render_pinned(
    prims: &[GaussianPrimitive],
    cam: &Camera,
    background: [f64; 3],
    active: &ActiveSet,
) -> Result<RenderOutput> {
    cam.validate()?;
    validate_primitives(prims)?;
    if active.width != cam.width || active.height != cam.height {
        return Err(Error::Shape("active set does not match the camera".into()));
    }
    let campos = cam.center();
    let mut slot_of = vec![usize::MAX; prims.len()];
    let mut splats = Vec::new();
    for (i, p) in prims.iter().enumerate() {
        if let Some(mut s) = project(i, p, cam, &campos).or_else(|| project_unbounded(i, p, cam, &campos)) {
            s.tiles = [0; 4];
            slot_of[i] = splats.len();
            splats.push(s);
        }
    }
    let pass = RenderPass {
        prims,
        cam: cam.clone(),
        background,
        splats,
        tiles_x: 0,
        tiles_y: 0,
        tile_lists: Vec::new(),
        output: RenderOutput {
            color: Image::new(cam.width, cam.height, 3),
            depth: Image::new(cam.width, cam.height, 1),
            alpha: Image::new(cam.width, cam.height, 1),
        },
    };
    let mut out = pass.output.clone();
    let mut scratch = Vec::new();
    for py in 0..cam.height {
        for px in 0..cam.width {
            let slots = active.pixels[py * cam.width + px]
                .iter()
                .map(|&i| match slot_of.get(i as usize) {
                    Some(&s) if s != usize::MAX => Ok(s),
                    _ => Err(Error::RejectedInput(format!("pinned primitive {i} is not visible"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let v = pass.shade_pixel(px, py, &slots, false, &mut scratch);
            for c in 0..3 {
                out.color.set(px, py, c, v[c]);
            }
            out.depth.set(px, py, 0, v[3]);
            out.alpha.set(px, py, 0, v[4]);
        }
    }
    Ok(out)
}

/// Projection that ignores the image bounds (the footprint may have moved
/// off-screen under a perturbation).
fn project_unbounded(index: usize, p: &GaussianPrimitive, cam: &Camera, campos: &Vector3<f64>) -> Option<Splat> {
    let big = Camera {
        cx: cam.cx + 1e6,
        cy: cam.cy + 1e6,
        width: cam.width + 2_000_000,
        height: cam.height + 2_000_000,
        ..cam.clone()
    };
    project(index, p, &big, campos).map(|mut s| {
        s.mean -= Vector2::new(1e6, 1e6);
        s
    })
}

/// Flattened parameters of a primitive list, in row order.
pub fn primitive_rows(prims: &[GaussianPrimitive]) -> Vec<f64> {
    prims.iter().flat_map(|p| p.to_row()).collect()
}

/// Inverse of [`primitive_rows`] for rows of `GEOMETRY_DIM + color_dim`.
pub fn primitives_from_rows(rows: &[f64], color_dim: usize) -> Result<Vec<GaussianPrimitive>> {
    let stride = GEOMETRY_DIM + color_dim;
    if !rows.len().is_multiple_of(stride) {
        return Err(Error::Shape(format!("{} values do not split into rows of {stride}", rows.len())));
    }
    rows.chunks(stride).map(GaussianPrimitive::from_row).collect()
}
