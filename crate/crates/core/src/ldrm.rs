//! Toy latent reconstruction model. Latent and camera-ray grids are cut into
//! patch tokens, fused channel-wise, mixed by a transformer stack and decoded
//! to one Gaussian row and one deformation row per output pixel.

use nalgebra::{DMatrix, Vector3};
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_ray_unchecked, pluecker_embed, Camera, Trajectory};
use crate::error::{ensure_finite, Error, Result};
use crate::gaussian::{
    deform, normalize_vjp, sh_coeff_count, sigmoid, DeformationDelta, GaussianField, GaussianPrimitive, Quat,
    DEFORM_DIM, GEOMETRY_DIM,
};
use crate::losses::{photometric_loss_and_grad, MultiScaleSsim, LAMBDA_P};
use crate::nn::{Adam, BlockCache, Grads, Linear, ParamId, ParamStore, TransformerBlock};
use crate::raster::{deform_backward, RenderCotangents, RenderPass};
use crate::tensor::Image;

/// Width of a deformation row.
pub const K_D: usize = DEFORM_DIM;
pub const LOG_SCALE_MIN: f64 = -8.0;
pub const LOG_SCALE_MAX: f64 = 3.0;
/// Raw quaternions shorter than this decode to the identity.
pub const QUAT_EPS: f64 = 1e-8;

/// Channel index of the raw depth along the pixel ray.
pub const DEPTH_CHANNEL: usize = 0;

/// Width of a Gaussian row: depth, two unused channels, log-scale, quaternion,
/// opacity logit and color coefficients.
pub fn gaussian_channels(sh_degree: usize) -> usize {
    GEOMETRY_DIM + sh_coeff_count(sh_degree)
}

/// `n × h × w × c` grid, channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl LatentGrid {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "latent grid {frames}x{height}x{width}x{channels} has an empty axis"
            )));
        }
        if data.len() != frames * height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {frames}x{height}x{width}x{channels} latent grid",
                data.len()
            )));
        }
        ensure_finite(&data, "latent grid")?;
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn random(frames: usize, height: usize, width: usize, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let data = (0..frames * height * width * channels)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Self::new(frames, height, width, channels, data)
    }

    #[inline]
    pub fn index(&self, f: usize, y: usize, x: usize, c: usize) -> usize {
        ((f * self.height + y) * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, f: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(f, y, x, c)]
    }

    /// Plücker rays of `cameras` resampled to `height × width`, one latent
    /// frame per camera.
    pub fn from_cameras(cameras: &[Camera], height: usize, width: usize) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::InsufficientData("no cameras for the ray grid".into()));
        }
        let resized = cameras.iter().map(|c| resample_camera(c, width, height)).collect();
        let timestamps = (0..cameras.len()).map(|i| i as f64).collect();
        let map = pluecker_embed(&Trajectory::new(resized, timestamps)?)?;
        Self::new(map.frames, map.height, map.width, 6, map.data)
    }
}

/// Stand-in latent built from color frames: each frame is box-downsampled
/// to `height × width` and its RGB values are mapped to `channels` by a fixed
/// random projection drawn from `seed`.
pub fn latent_from_frames(frames: &[Image], height: usize, width: usize, channels: usize, seed: u64) -> Result<LatentGrid> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InsufficientData("no frames to encode".into()))?;
    if height == 0 || width == 0 || first.width % width != 0 || first.height % height != 0 {
        return Err(Error::Shape(format!(
            "{}x{} frames do not downsample to {height}x{width}",
            first.height, first.width
        )));
    }
    let (fy, fx) = (first.height / height, first.width / width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<f64> = (0..3 * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut data = Vec::with_capacity(frames.len() * height * width * channels);
    for img in frames {
        if !img.same_shape(first) || img.channels != 3 {
            return Err(Error::Shape("frames differ in shape or are not RGB".into()));
        }
        for y in 0..height {
            for x in 0..width {
                let mut rgb = [0.0; 3];
                for sy in 0..fy {
                    for sx in 0..fx {
                        for (c, v) in rgb.iter_mut().enumerate() {
                            *v += img.get(x * fx + sx, y * fy + sy, c);
                        }
                    }
                }
                let norm = (fx * fy) as f64;
                for k in 0..channels {
                    data.push((0..3).map(|c| rgb[c] / norm * proj[c * channels + k]).sum());
                }
            }
        }
    }
    LatentGrid::new(frames.len(), height, width, channels, data)
}

fn resample_camera(cam: &Camera, width: usize, height: usize) -> Camera {
    let sx = width as f64 / cam.width as f64;
    let sy = height as f64 / cam.height as f64;
    Camera {
        fx: cam.fx * sx,
        fy: cam.fy * sy,
        cx: cam.cx * sx,
        cy: cam.cy * sy,
        width,
        height,
        world_to_cam: cam.world_to_cam,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenSource {
    Latent,
    Pose,
    Fused,
}

/// Tokens in frame-major, row-major patch order, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: DMatrix<f64>,
    pub source: TokenSource,
    /// Patch grid `(frames, rows, cols)` the tokens were cut from.
    pub grid: [usize; 3],
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Flattened `p × p` patches, one row per patch, columns ordered
/// `(dy, dx, channel)`.
pub fn patch_matrix(z: &LatentGrid, p: usize) -> Result<DMatrix<f64>> {
    if p == 0 || !z.height.is_multiple_of(p) || !z.width.is_multiple_of(p) {
        return Err(Error::Shape(format!(
            "patch size {p} does not divide the {}x{} grid",
            z.height, z.width
        )));
    }
    let (gh, gw, c) = (z.height / p, z.width / p, z.channels);
    let rows = z.frames * gh * gw;
    let mut m = DMatrix::zeros(rows, p * p * c);
    for f in 0..z.frames {
        for gy in 0..gh {
            for gx in 0..gw {
                let l = (f * gh + gy) * gw + gx;
                for dy in 0..p {
                    for dx in 0..p {
                        let base = z.index(f, gy * p + dy, gx * p + dx, 0);
                        for ch in 0..c {
                            m[(l, (dy * p + dx) * c + ch)] = z.data[base + ch];
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Cuts `z` into patches and projects each patch with `proj`.
pub fn patchify(
    z: &LatentGrid,
    p: usize,
    store: &ParamStore,
    proj: &Linear,
    source: TokenSource,
) -> Result<TokenSequence> {
    let m = patch_matrix(z, p)?;
    if proj.input != m.ncols() {
        return Err(Error::Shape(format!(
            "projection takes {} inputs, patches have {}",
            proj.input,
            m.ncols()
        )));
    }
    Ok(TokenSequence {
        tokens: proj.forward(store, &m),
        source,
        grid: [z.frames, z.height / p, z.width / p],
    })
}

fn concat_columns(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Per-position concatenation `[latent | pose]` projected back by `proj`.
pub fn fuse_tokens(
    latent: &TokenSequence,
    pose: &TokenSequence,
    store: &ParamStore,
    proj: &Linear,
) -> Result<TokenSequence> {
    if latent.len() != pose.len() {
        return Err(Error::Shape(format!(
            "{} latent tokens against {} pose tokens",
            latent.len(),
            pose.len()
        )));
    }
    if proj.input != latent.dim() + pose.dim() {
        return Err(Error::Shape(format!(
            "fusion takes {} channels, tokens have {}",
            proj.input,
            latent.dim() + pose.dim()
        )));
    }
    let cat = concat_columns(&latent.tokens, &pose.tokens);
    Ok(TokenSequence {
        tokens: proj.forward(store, &cat),
        source: TokenSource::Fused,
        grid: latent.grid,
    })
}

/// Runs the tokens through `blocks` in order.
pub fn transform(tokens: &TokenSequence, store: &ParamStore, blocks: &[TransformerBlock]) -> Result<TokenSequence> {
    if blocks.is_empty() {
        return Err(Error::Config("transformer stack needs at least one block".into()));
    }
    let mut x = tokens.tokens.clone();
    for b in blocks {
        x = b.forward(store, &x).0;
    }
    Ok(TokenSequence {
        tokens: x,
        ..tokens.clone()
    })
}

/// Dense per-pixel maps, rows indexed `(t·H + y)·W + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LdrmOutput {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub gaussian_map: DMatrix<f64>,
    pub deformation_map: DMatrix<f64>,
}

impl LdrmOutput {
    #[inline]
    pub fn row_index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.height + y) * self.width + x
    }

    pub fn rows(&self) -> usize {
        self.gaussian_map.nrows()
    }
}

/// Geometry of the token-to-pixel rearrangement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Unpatch {
    grid: [usize; 3],
    factors: [usize; 3],
    target: [usize; 3],
    k_g: usize,
}

impl Unpatch {
    fn new(grid: [usize; 3], target: [usize; 3], k_g: usize) -> Result<Self> {
        let mut factors = [0; 3];
        for i in 0..3 {
            if grid[i] == 0 || target[i] == 0 || !target[i].is_multiple_of(grid[i]) {
                return Err(Error::Shape(format!(
                    "token grid {grid:?} does not divide output {target:?}"
                )));
            }
            factors[i] = target[i] / grid[i];
        }
        Ok(Self {
            grid,
            factors,
            target,
            k_g,
        })
    }

    fn width(&self) -> usize {
        self.k_g + K_D
    }

    fn head_outputs(&self) -> usize {
        self.factors.iter().product::<usize>() * self.width()
    }

    /// Calls `f(token, column offset, output row)` for every sub-pixel slot.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [n, gh, gw] = self.grid;
        let [ft, fh, fw] = self.factors;
        let [_, h, w] = self.target;
        let k = self.width();
        for g in 0..n {
            for gy in 0..gh {
                for gx in 0..gw {
                    let l = (g * gh + gy) * gw + gx;
                    for dt in 0..ft {
                        for dy in 0..fh {
                            for dx in 0..fw {
                                let slot = (dt * fh + dy) * fw + dx;
                                let row = ((g * ft + dt) * h + gy * fh + dy) * w + gx * fw + dx;
                                f(l, slot * k, row);
                            }
                        }
                    }
                }
            }
        }
    }

    fn scatter(&self, head: &DMatrix<f64>) -> LdrmOutput {
        let rows = self.target.iter().product();
        let mut g = DMatrix::zeros(rows, self.k_g);
        let mut d = DMatrix::zeros(rows, K_D);
        self.for_each(|l, off, r| {
            for c in 0..self.k_g {
                g[(r, c)] = head[(l, off + c)];
            }
            for c in 0..K_D {
                d[(r, c)] = head[(l, off + self.k_g + c)];
            }
        });
        LdrmOutput {
            frames: self.target[0],
            height: self.target[1],
            width: self.target[2],
            gaussian_map: g,
            deformation_map: d,
        }
    }

    fn gather(&self, dg: &DMatrix<f64>, dd: &DMatrix<f64>) -> DMatrix<f64> {
        let tokens = self.grid.iter().product();
        let mut out = DMatrix::zeros(tokens, self.head_outputs());
        self.for_each(|l, off, r| {
            for c in 0..self.k_g {
                out[(l, off + c)] = dg[(r, c)];
            }
            for c in 0..K_D {
                out[(l, off + self.k_g + c)] = dd[(r, c)];
            }
        });
        out
    }
}

/// Applies the per-token head and rearranges its outputs into pixel-aligned
/// maps of `target = (T, H, W)`.
pub fn decode(
    tokens: &TokenSequence,
    store: &ParamStore,
    head: &Linear,
    target: [usize; 3],
    k_g: usize,
) -> Result<LdrmOutput> {
    let un = Unpatch::new(tokens.grid, target, k_g)?;
    if tokens.len() != tokens.grid.iter().product::<usize>() {
        return Err(Error::Shape(format!(
            "{} tokens for a {:?} grid",
            tokens.len(),
            tokens.grid
        )));
    }
    if head.output != un.head_outputs() || head.input != tokens.dim() {
        return Err(Error::Shape(format!(
            "head maps {} to {}, decoding needs {} to {}",
            head.input,
            head.output,
            tokens.dim(),
            un.head_outputs()
        )));
    }
    Ok(un.scatter(&head.forward(store, &tokens.tokens)))
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn unit_or_identity(raw: [f64; 4]) -> Quat {
    let q = Quat(raw);
    let n = q.norm();
    if n < QUAT_EPS {
        Quat::IDENTITY
    } else {
        Quat(raw.map(|c| c / n))
    }
}

/// Turns one Gaussian row and one deformation row into a primitive placed on
/// the pixel ray `origin + s·dir` and its deformation delta.
///
/// Panics if the rows are shorter than a degree-0 Gaussian row or not
/// exactly [`K_D`] wide.
pub fn activate_gaussians(
    g_row: &[f64],
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    d_row: &[f64],
) -> (GaussianPrimitive, DeformationDelta) {
    assert!(g_row.len() >= GEOMETRY_DIM + 3, "gaussian row too short");
    assert_eq!(d_row.len(), K_D, "deformation row width");
    let depth = softplus(g_row[DEPTH_CHANNEL]);
    let clamp = |v: f64| v.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX);
    let prim = GaussianPrimitive {
        mu: origin + dir * depth,
        log_scale: Vector3::new(clamp(g_row[3]), clamp(g_row[4]), clamp(g_row[5])),
        quat: unit_or_identity([g_row[6], g_row[7], g_row[8], g_row[9]]),
        opacity_logit: g_row[10],
        color: g_row[GEOMETRY_DIM..].iter().map(|&v| sigmoid(v)).collect(),
    };
    let delta = DeformationDelta {
        d_mu: Vector3::new(d_row[0], d_row[1], d_row[2]),
        d_quat: unit_or_identity([d_row[3], d_row[4], d_row[5], d_row[6]]),
        d_log_scale: Vector3::new(d_row[7], d_row[8], d_row[9]),
    };
    (prim, delta)
}

fn quat_vjp(raw: [f64; 4], g: &[f64]) -> [f64; 4] {
    let q = Quat(raw);
    if q.norm() < QUAT_EPS {
        [0.0; 4]
    } else {
        normalize_vjp(&q, [g[0], g[1], g[2], g[3]])
    }
}

/// Pulls gradients with respect to the activated primitive row (in
/// [`GaussianPrimitive::to_row`] order) and delta row back to the raw rows.
pub fn activate_backward(
    g_row: &[f64],
    dir: &Vector3<f64>,
    d_row: &[f64],
    g_prim: &[f64],
    g_delta: Option<&[f64]>,
) -> (Vec<f64>, [f64; K_D]) {
    let mut out = vec![0.0; g_row.len()];
    let g_mu = Vector3::new(g_prim[0], g_prim[1], g_prim[2]);
    out[DEPTH_CHANNEL] = g_mu.dot(dir) * sigmoid(g_row[DEPTH_CHANNEL]);
    for c in 3..6 {
        if g_row[c] > LOG_SCALE_MIN && g_row[c] < LOG_SCALE_MAX {
            out[c] = g_prim[c];
        }
    }
    let gq = quat_vjp([g_row[6], g_row[7], g_row[8], g_row[9]], &g_prim[6..10]);
    out[6..10].copy_from_slice(&gq);
    out[10] = g_prim[10];
    for c in GEOMETRY_DIM..g_row.len() {
        let s = sigmoid(g_row[c]);
        out[c] = g_prim[c] * s * (1.0 - s);
    }
    let mut d_out = [0.0; K_D];
    if let Some(gd) = g_delta {
        d_out[..3].copy_from_slice(&gd[..3]);
        let gq = quat_vjp([d_row[3], d_row[4], d_row[5], d_row[6]], &gd[3..7]);
        d_out[3..7].copy_from_slice(&gq);
        d_out[7..].copy_from_slice(&gd[7..]);
    }
    (out, d_out)
}

/// One Gaussian per pixel of frame 0, placed on the rays of `cameras[0]`,
/// with per-frame deltas read from the deformation map at the same pixel.
/// Frame 0 is the canonical frame, so its deltas are the identity.
pub fn assemble_field(out: &LdrmOutput, cameras: &[Camera], timestamps: &[f64]) -> Result<GaussianField> {
    check_assembly(out, cameras, timestamps)?;
    let rays = pixel_rays(&cameras[0]);
    let m = out.height * out.width;
    let mut canonical = Vec::with_capacity(m);
    let mut tracks = vec![vec![DeformationDelta::IDENTITY; m]; out.frames];
    for (i, (o, d)) in rays.iter().enumerate() {
        for t in 0..out.frames {
            let r = t * m + i;
            let g_row: Vec<f64> = out.gaussian_map.row(i).iter().copied().collect();
            let d_row: Vec<f64> = out.deformation_map.row(r).iter().copied().collect();
            let (p, delta) = activate_gaussians(&g_row, o, d, &d_row);
            if t == 0 {
                canonical.push(p);
            } else {
                tracks[t][i] = delta;
            }
        }
    }
    if out.frames == 1 {
        GaussianField::new_static(canonical)
    } else {
        GaussianField::new_dynamic(canonical, tracks, timestamps.to_vec())
    }
}

/// Gradients of the maps given gradients with respect to the assembled
/// field: canonical rows (`M × (11 + C)`, concatenated) and, per frame, delta
/// rows (`M × 10`, concatenated). Frame 0 deltas are fixed and ignored.
pub fn assemble_backward(
    out: &LdrmOutput,
    cameras: &[Camera],
    canonical_grads: &[f64],
    delta_grads: &[Option<Vec<f64>>],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k_g = out.gaussian_map.ncols();
    let m = out.height * out.width;
    if canonical_grads.len() != m * k_g {
        return Err(Error::Shape(format!(
            "{} canonical gradient values for {m} rows of {k_g}",
            canonical_grads.len()
        )));
    }
    let rays = pixel_rays(&cameras[0]);
    let mut dg = DMatrix::zeros(out.rows(), k_g);
    let mut dd = DMatrix::zeros(out.rows(), K_D);
    for (i, (_, dir)) in rays.iter().enumerate() {
        let g_row: Vec<f64> = out.gaussian_map.row(i).iter().copied().collect();
        let gp = &canonical_grads[i * k_g..(i + 1) * k_g];
        for t in 0..out.frames {
            let r = t * m + i;
            let d_row: Vec<f64> = out.deformation_map.row(r).iter().copied().collect();
            let gd = match delta_grads.get(t) {
                Some(Some(v)) if t > 0 => Some(&v[i * K_D..(i + 1) * K_D]),
                _ => None,
            };
            let (a, b) = activate_backward(&g_row, dir, &d_row, gp, gd);
            if t == 0 {
                for (c, v) in a.iter().enumerate() {
                    dg[(i, c)] = *v;
                }
            }
            for (c, v) in b.iter().enumerate() {
                dd[(r, c)] = *v;
            }
        }
    }
    Ok((dg, dd))
}

fn check_assembly(out: &LdrmOutput, cameras: &[Camera], timestamps: &[f64]) -> Result<()> {
    let cam = cameras
        .first()
        .ok_or_else(|| Error::InsufficientData("no source camera".into()))?;
    if cam.width != out.width || cam.height != out.height {
        return Err(Error::Shape(format!(
            "source camera is {}x{}, maps are {}x{}",
            cam.width, cam.height, out.width, out.height
        )));
    }
    if timestamps.len() != out.frames {
        return Err(Error::Shape(format!(
            "{} timestamps for {} frames",
            timestamps.len(),
            out.frames
        )));
    }
    Ok(())
}

fn pixel_rays(cam: &Camera) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut rays = Vec::with_capacity(cam.width * cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            rays.push(pixel_ray_unchecked(cam, x as f64 + 0.5, y as f64 + 0.5));
        }
    }
    rays
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdrmConfig {
    pub latent_frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub sh_degree: usize,
    /// Head bias of the depth channel, expressed as a distance along the ray.
    pub init_depth: f64,
    pub init_log_scale: f64,
    pub init_opacity_logit: f64,
    /// Weight gain of the decoding head.
    pub head_gain: f64,
    pub seed: u64,
}

impl Default for LdrmConfig {
    fn default() -> Self {
        Self {
            latent_frames: 2,
            latent_height: 8,
            latent_width: 8,
            latent_channels: 8,
            patch: 2,
            dim: 16,
            heads: 2,
            blocks: 2,
            frames: 2,
            height: 16,
            width: 16,
            sh_degree: 0,
            init_depth: 3.0,
            init_log_scale: -2.0,
            init_opacity_logit: 0.0,
            head_gain: 0.1,
            seed: 0,
        }
    }
}

impl LdrmConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.latent_frames,
            self.latent_height,
            self.latent_width,
            self.latent_channels,
            self.patch,
            self.dim,
            self.heads,
            self.blocks,
            self.frames,
            self.height,
            self.width,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.latent_height.is_multiple_of(self.patch) || !self.latent_width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "patch {} does not divide the {}x{} latent",
                self.patch, self.latent_height, self.latent_width
            )));
        }
        let grid = self.token_grid();
        let target = [self.frames, self.height, self.width];
        if (0..3).any(|i| !target[i].is_multiple_of(grid[i])) {
            return Err(Error::Config(format!(
                "token grid {grid:?} does not divide output {target:?}"
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.sh_degree > 1 {
            return Err(Error::Config(format!("SH degree {} is not supported", self.sh_degree)));
        }
        if !(self.init_depth > 0.0 && self.init_depth.is_finite()) {
            return Err(Error::Config("initial depth must be positive".into()));
        }
        Ok(())
    }

    pub fn token_grid(&self) -> [usize; 3] {
        [
            self.latent_frames,
            self.latent_height / self.patch,
            self.latent_width / self.patch,
        ]
    }

    pub fn tokens(&self) -> usize {
        self.token_grid().iter().product()
    }

    pub fn k_g(&self) -> usize {
        gaussian_channels(self.sh_degree)
    }
}

#[derive(Clone, Debug)]
pub struct Ldrm {
    pub config: LdrmConfig,
    pub store: ParamStore,
    pub latent_proj: Linear,
    pub pose_proj: Linear,
    pub fuse: Linear,
    pub position: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub head: Linear,
}

pub struct LdrmCache {
    latent_patches: DMatrix<f64>,
    pose_patches: DMatrix<f64>,
    fused_input: DMatrix<f64>,
    blocks: Vec<BlockCache>,
    tokens: DMatrix<f64>,
}

impl Ldrm {
    pub fn new(config: LdrmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (p, c, d) = (config.patch, config.latent_channels, config.dim);
        let latent_proj = Linear::new(&mut store, "latent_proj", p * p * c, d, 1.0, &mut rng);
        let pose_proj = Linear::new(&mut store, "pose_proj", p * p * 6, d, 1.0, &mut rng);
        let fuse = Linear::new(&mut store, "fuse", 2 * d, d, 1.0, &mut rng);
        let position = store.add_normal("position", &[config.tokens(), d], 0.02, &mut rng);
        let blocks = (0..config.blocks)
            .map(|i| TransformerBlock::new(&mut store, &format!("block{i}"), d, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let un = Unpatch::new(config.token_grid(), [config.frames, config.height, config.width], config.k_g())?;
        let head = Linear::new(&mut store, "head", d, un.head_outputs(), config.head_gain, &mut rng);
        let k = un.width();
        let k_g = config.k_g();
        let bias = store.slice_mut(head.b);
        for slot in bias.chunks_mut(k) {
            slot[DEPTH_CHANNEL] = softplus_inverse(config.init_depth);
            slot[3..6].fill(config.init_log_scale);
            slot[6] = 1.0;
            slot[10] = config.init_opacity_logit;
            slot[k_g + 3] = 1.0;
        }
        Ok(Self {
            config,
            store,
            latent_proj,
            pose_proj,
            fuse,
            position,
            blocks,
            head,
        })
    }

    fn check_inputs(&self, latent: &LatentGrid, pose: &LatentGrid) -> Result<()> {
        let c = &self.config;
        let want = [c.latent_frames, c.latent_height, c.latent_width];
        if [latent.frames, latent.height, latent.width] != want || latent.channels != c.latent_channels {
            return Err(Error::Shape(format!(
                "latent is {}x{}x{}x{}, model expects {:?}x{}",
                latent.frames, latent.height, latent.width, latent.channels, want, c.latent_channels
            )));
        }
        if [pose.frames, pose.height, pose.width] != want || pose.channels != 6 {
            return Err(Error::Shape(format!(
                "ray grid is {}x{}x{}x{}, model expects {:?}x6",
                pose.frames, pose.height, pose.width, pose.channels, want
            )));
        }
        Ok(())
    }

    pub fn predict(&self, latent: &LatentGrid, pose: &LatentGrid) -> Result<LdrmOutput> {
        Ok(self.forward(latent, pose)?.0)
    }

    pub fn forward(&self, latent: &LatentGrid, pose: &LatentGrid) -> Result<(LdrmOutput, LdrmCache)> {
        self.check_inputs(latent, pose)?;
        let s = &self.store;
        let latent_patches = patch_matrix(latent, self.config.patch)?;
        let pose_patches = patch_matrix(pose, self.config.patch)?;
        let fused_input = concat_columns(
            &self.latent_proj.forward(s, &latent_patches),
            &self.pose_proj.forward(s, &pose_patches),
        );
        let mut x = self.fuse.forward(s, &fused_input) + s.matrix(self.position);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, cache) = b.forward(s, &x);
            caches.push(cache);
            x = y;
        }
        let un = self.unpatch()?;
        let out = un.scatter(&self.head.forward(s, &x));
        Ok((
            out,
            LdrmCache {
                latent_patches,
                pose_patches,
                fused_input,
                blocks: caches,
                tokens: x,
            },
        ))
    }

    fn unpatch(&self) -> Result<Unpatch> {
        let c = &self.config;
        Unpatch::new(c.token_grid(), [c.frames, c.height, c.width], c.k_g())
    }

    /// Parameter gradients given gradients of both output maps.
    pub fn backward(&self, cache: &LdrmCache, d_gaussian: &DMatrix<f64>, d_deformation: &DMatrix<f64>) -> Result<Grads> {
        let s = &self.store;
        let un = self.unpatch()?;
        let rows = un.target.iter().product::<usize>();
        if d_gaussian.shape() != (rows, un.k_g) || d_deformation.shape() != (rows, K_D) {
            return Err(Error::Shape("map gradients do not match the output".into()));
        }
        let mut grads = s.zero_grads();
        let d_head = un.gather(d_gaussian, d_deformation);
        let mut dx = self.head.backward(s, &mut grads, &cache.tokens, &d_head);
        for (b, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            dx = b.backward(s, &mut grads, bc, &dx);
        }
        grads.add_matrix(s, self.position, &dx);
        let d_cat = self.fuse.backward(s, &mut grads, &cache.fused_input, &dx);
        let d = self.config.dim;
        let d_latent = d_cat.columns(0, d).into_owned();
        let d_pose = d_cat.columns(d, d).into_owned();
        self.latent_proj.backward(s, &mut grads, &cache.latent_patches, &d_latent);
        self.pose_proj.backward(s, &mut grads, &cache.pose_patches, &d_pose);
        Ok(grads)
    }
}

/// Settings of the end-to-end single-scene fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda_p: f64,
    pub background: [f64; 3],
    /// Stop once the loss falls to this fraction of its initial value.
    pub stop_ratio: Option<f64>,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 3e-3,
            lambda_p: LAMBDA_P,
            background: [0.0; 3],
            stop_ratio: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    /// Loss before each update.
    pub losses: Vec<f64>,
}

impl OverfitReport {
    pub fn initial(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn best(&self) -> f64 {
        self.losses.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Fractional drop of the best loss relative to the initial one.
    pub fn reduction(&self) -> f64 {
        1.0 - self.best() / self.initial()
    }
}

/// Mean photometric loss over all frames of the decoded field, and its
/// gradients with respect to both output maps.
pub fn scene_loss_and_grad(
    out: &LdrmOutput,
    cameras: &[Camera],
    timestamps: &[f64],
    targets: &[Image],
    background: [f64; 3],
    lambda_p: f64,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    if targets.len() != out.frames || cameras.len() != out.frames {
        return Err(Error::Shape(format!(
            "{} targets and {} cameras for {} frames",
            targets.len(),
            cameras.len(),
            out.frames
        )));
    }
    let field = assemble_field(out, cameras, timestamps)?;
    let metric = MultiScaleSsim::default();
    let scale = 1.0 / out.frames as f64;
    let k = field.canonical.first().map_or(0, |p| p.to_row().len());
    let mut canonical = vec![0.0; field.len() * k];
    let mut deltas = Vec::with_capacity(out.frames);
    let mut total = 0.0;
    for (t, (cam, target)) in cameras.iter().zip(targets).enumerate() {
        let prims = deform(&field, t)?;
        let pass = RenderPass::new(&prims, cam, background)?;
        let (loss, g) = photometric_loss_and_grad(&pass.output().color, target, lambda_p, &metric)?;
        total += scale * loss;
        let mut cot = RenderCotangents::zeros(cam.width, cam.height);
        cot.color = g;
        cot.color.data.iter_mut().for_each(|v| *v *= scale);
        let grads = deform_backward(&field, t, pass.backward(&cot)?)?;
        for (a, b) in canonical.iter_mut().zip(grads.canonical_rows()) {
            *a += b;
        }
        deltas.push(grads.deltas.map(|d| d.rows()));
    }
    let (dg, dd) = assemble_backward(out, cameras, &canonical, &deltas)?;
    Ok((total, dg, dd))
}

/// Trains `model` end to end (decode, activate, render, photometric loss) on
/// one scene with Adam at a constant learning rate.
pub fn overfit(
    model: &mut Ldrm,
    latent: &LatentGrid,
    pose: &LatentGrid,
    cameras: &[Camera],
    timestamps: &[f64],
    targets: &[Image],
    config: &OverfitConfig,
) -> Result<OverfitReport> {
    let mut adam = Adam::new(model.store.len());
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (out, cache) = model.forward(latent, pose)?;
        let (loss, dg, dd) =
            scene_loss_and_grad(&out, cameras, timestamps, targets, config.background, config.lambda_p)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: step,
                reason: "non-finite reconstruction loss".into(),
            });
        }
        losses.push(loss);
        if config.stop_ratio.is_some_and(|r| loss <= r * losses[0]) {
            break;
        }
        let grads = model.backward(&cache, &dg, &dd)?;
        adam.step(&mut model.store.values, &grads.0, |_| config.lr);
    }
    Ok(OverfitReport { losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;
    use crate::nn::tests::random_matrix;
    use crate::raster::render;

    fn identity_linear(store: &mut ParamStore, n: usize, out: usize) -> Linear {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(store, "id", n, out, 0.0, &mut rng);
        let w = store.slice_mut(lin.w);
        for i in 0..n.min(out) {
            w[i * out + i] = 1.0;
        }
        lin
    }

    #[test]
    fn patch_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = LatentGrid::random(3, 4, 4, 2, &mut rng).unwrap();
        assert_eq!(patch_matrix(&z, 4).unwrap().nrows(), 3);
        let z = LatentGrid::random(2, 4, 4, 2, &mut rng).unwrap();
        assert_eq!(patch_matrix(&z, 2).unwrap().nrows(), 8);
        assert!(matches!(patch_matrix(&z, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn unit_patches_with_identity_projection_are_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = LatentGrid::random(2, 3, 5, 4, &mut rng).unwrap();
        let mut store = ParamStore::new();
        let id = identity_linear(&mut store, 4, 4);
        let t = patchify(&z, 1, &store, &id, TokenSource::Latent).unwrap();
        assert_eq!(t.len(), 30);
        for f in 0..2 {
            for y in 0..3 {
                for x in 0..5 {
                    for c in 0..4 {
                        assert_eq!(t.tokens[((f * 3 + y) * 5 + x, c)], z.get(f, y, x, c));
                    }
                }
            }
        }
    }

    #[test]
    fn fusion_keeps_length_and_order_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let id = identity_linear(&mut store, 8, 4);
        let lat = TokenSequence {
            tokens: random_matrix(&mut rng, 6, 4),
            source: TokenSource::Latent,
            grid: [1, 2, 3],
        };
        let zero = TokenSequence {
            tokens: DMatrix::zeros(6, 4),
            source: TokenSource::Pose,
            grid: [1, 2, 3],
        };
        let f = fuse_tokens(&lat, &zero, &store, &id).unwrap();
        assert_eq!(f.tokens, lat.tokens);
        assert_eq!(f.source, TokenSource::Fused);

        let proj = Linear::new(&mut store, "fuse", 8, 4, 1.0, &mut rng);
        let pose = TokenSequence {
            tokens: random_matrix(&mut rng, 6, 4),
            source: TokenSource::Pose,
            grid: [1, 2, 3],
        };
        let a = fuse_tokens(&lat, &pose, &store, &proj).unwrap();
        let b = fuse_tokens(&pose, &lat, &store, &proj).unwrap();
        assert_eq!(a.len(), 6);
        assert!((a.tokens - b.tokens).abs().max() > 1e-6);

        let short = TokenSequence {
            tokens: random_matrix(&mut rng, 5, 4),
            ..pose
        };
        assert!(matches!(fuse_tokens(&lat, &short, &store, &proj), Err(Error::Shape(_))));
    }

    #[test]
    fn zeroed_output_projections_make_blocks_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let blocks: Vec<_> = (0..2)
            .map(|i| TransformerBlock::new(&mut store, &format!("b{i}"), 8, 2, &mut rng).unwrap())
            .collect();
        for b in &blocks {
            store.slice_mut(b.attn.out.w).fill(0.0);
            store.slice_mut(b.ff2.w).fill(0.0);
        }
        let t = TokenSequence {
            tokens: random_matrix(&mut rng, 4, 8),
            source: TokenSource::Fused,
            grid: [1, 2, 2],
        };
        assert_eq!(transform(&t, &store, &blocks).unwrap().tokens, t.tokens);
        assert!(matches!(transform(&t, &store, &[]), Err(Error::Config(_))));
        let mut s2 = ParamStore::new();
        assert!(matches!(
            TransformerBlock::new(&mut s2, "bad", 6, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn decode_shapes_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let k_g = gaussian_channels(0);
        let un = Unpatch::new([2, 2, 2], [2, 8, 8], k_g).unwrap();
        let head = Linear::new(&mut store, "head", 4, un.head_outputs(), 0.0, &mut rng);
        let t = TokenSequence {
            tokens: random_matrix(&mut rng, 8, 4),
            source: TokenSource::Fused,
            grid: [2, 2, 2],
        };
        let out = decode(&t, &store, &head, [2, 8, 8], k_g).unwrap();
        assert_eq!(out.rows(), 128);
        assert_eq!(out.deformation_map.ncols(), 10);
        assert!(out.gaussian_map.iter().all(|&v| v == 0.0));
        assert!(out.deformation_map.iter().all(|&v| v == 0.0));
        assert!(matches!(decode(&t, &store, &head, [2, 7, 8], k_g), Err(Error::Shape(_))));
    }

    #[test]
    fn rearrangement_is_a_permutation() {
        let un = Unpatch::new([2, 2, 3], [4, 6, 9], 14).unwrap();
        let mut seen = vec![0usize; 4 * 6 * 9];
        let mut slots = std::collections::HashSet::new();
        un.for_each(|l, off, r| {
            seen[r] += 1;
            assert!(slots.insert((l, off)));
        });
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn activation_examples() {
        let o = Vector3::new(0.5, -1.0, 2.0);
        let d = Vector3::new(0.0, 0.6, 0.8);
        let (p, delta) = activate_gaussians(&[0.0; 14], &o, &d, &[0.0; 10]);
        assert!((p.mu - (o + d * 2f64.ln())).norm() < 1e-15);
        assert_eq!(p.quat, Quat::IDENTITY);
        assert_eq!(p.opacity(), 0.5);
        assert_eq!(p.color, vec![0.5; 3]);
        assert!(delta.is_identity());

        let mut row = [0.0; 14];
        row[0] = 1e3;
        row[3] = -50.0;
        row[4] = 50.0;
        row[9] = 2.0;
        let (p, _) = activate_gaussians(&row, &o, &d, &[0.0; 10]);
        assert!(p.mu.iter().all(|v| v.is_finite()));
        assert!((p.mu - (o + d * 1e3)).norm() < 1e-9);
        assert_eq!(p.log_scale, Vector3::new(-8.0, 3.0, 0.0));
        assert_eq!(p.quat, Quat([0.0, 0.0, 0.0, 1.0]));
        assert_eq!(softplus(-1e3), 0.0);
        assert!((softplus(softplus_inverse(3.0)) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn activation_backward_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let o = Vector3::new(0.1, 0.2, -0.3);
        let d = Vector3::new(0.3, -0.4, 0.8).normalize();
        let g_row: Vec<f64> = (0..14).map(|_| rng.random_range(-1.5..1.5)).collect();
        let d_row: Vec<f64> = (0..10).map(|_| rng.random_range(-1.5..1.5)).collect();
        let gp: Vec<f64> = (0..14).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gd: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |g: &[f64], dr: &[f64]| {
            let (p, delta) = activate_gaussians(g, &o, &d, dr);
            let a: f64 = p.to_row().iter().zip(&gp).map(|(x, y)| x * y).sum();
            let b: f64 = delta.to_row().iter().zip(&gd).map(|(x, y)| x * y).sum();
            a + b
        };
        let (ag, ad) = activate_backward(&g_row, &d, &d_row, &gp, Some(&gd));
        let h = 1e-6;
        for i in 0..14 {
            let (mut p, mut m) = (g_row.clone(), g_row.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (objective(&p, &d_row) - objective(&m, &d_row)) / (2.0 * h);
            assert!((fd - ag[i]).abs() < 1e-7, "gaussian channel {i}: {fd} vs {}", ag[i]);
        }
        for i in 0..10 {
            let (mut p, mut m) = (d_row.clone(), d_row.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (objective(&g_row, &p) - objective(&g_row, &m)) / (2.0 * h);
            assert!((fd - ad[i]).abs() < 1e-7, "deformation channel {i}: {fd} vs {}", ad[i]);
        }
    }

    fn small_config() -> LdrmConfig {
        LdrmConfig {
            latent_frames: 2,
            latent_height: 4,
            latent_width: 4,
            latent_channels: 3,
            patch: 2,
            dim: 8,
            heads: 2,
            blocks: 1,
            frames: 2,
            height: 4,
            width: 4,
            head_gain: 1.0,
            ..LdrmConfig::default()
        }
    }

    #[test]
    fn model_backward_matches_differences() {
        let cfg = small_config();
        let mut model = Ldrm::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let latent = LatentGrid::random(2, 4, 4, 3, &mut rng).unwrap();
        let pose = LatentGrid::random(2, 4, 4, 6, &mut rng).unwrap();
        let (out, cache) = model.forward(&latent, &pose).unwrap();
        let dg = random_matrix(&mut rng, out.rows(), cfg.k_g());
        let dd = random_matrix(&mut rng, out.rows(), K_D);
        let grads = model.backward(&cache, &dg, &dd).unwrap();
        let h = 1e-6;
        let n = model.store.len();
        for k in 0..60 {
            let i = (k * 7919) % n;
            let orig = model.store.values[i];
            model.store.values[i] = orig + h;
            let o1 = model.predict(&latent, &pose).unwrap();
            model.store.values[i] = orig - h;
            let o2 = model.predict(&latent, &pose).unwrap();
            model.store.values[i] = orig;
            let fd = ((o1.gaussian_map - o2.gaussian_map).dot(&dg) + (o1.deformation_map - o2.deformation_map).dot(&dd))
                / (2.0 * h);
            let g = grads.0[i];
            assert!(
                (fd - g).abs() <= 1e-3 * fd.abs().max(g.abs()).max(1e-3),
                "parameter {i}: {fd} vs {g}"
            );
        }
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = small_config();
        let latent = LatentGrid::random(2, 4, 4, 3, &mut rng).unwrap();
        let pose = LatentGrid::random(2, 4, 4, 6, &mut rng).unwrap();
        let a = Ldrm::new(cfg.clone()).unwrap().predict(&latent, &pose).unwrap();
        let b = Ldrm::new(cfg).unwrap().predict(&latent, &pose).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows(), 2 * 4 * 4);
        assert_eq!(a.deformation_map.ncols(), K_D);
    }

    #[test]
    fn assembled_field_uses_frame_zero_as_canonical() {
        let cam = Camera::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), 4, 4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = LdrmOutput {
            frames: 2,
            height: 4,
            width: 4,
            gaussian_map: random_matrix(&mut rng, 32, 14),
            deformation_map: random_matrix(&mut rng, 32, 10),
        };
        let field = assemble_field(&out, &[cam.clone(), cam.clone()], &[0.0, 1.0]).unwrap();
        assert_eq!(field.len(), 16);
        assert!(field.tracks[0].iter().all(|d| d.is_identity()));
        assert!(field.tracks[1].iter().all(|d| !d.is_identity()));
        let single = LdrmOutput {
            frames: 1,
            gaussian_map: out.gaussian_map.rows(0, 16).into_owned(),
            deformation_map: out.deformation_map.rows(0, 16).into_owned(),
            ..out
        };
        assert!(assemble_field(&single, &[cam], &[0.0]).unwrap().is_static());
    }

    #[test]
    fn short_overfit_reduces_loss() {
        let cam = Camera::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), 16, 16, 1.0).unwrap();
        let blob = GaussianPrimitive::isotropic(Vector3::new(0.2, 0.0, 0.0), 0.5, 3.0, [0.9, 0.2, 0.1]);
        let moved = GaussianPrimitive {
            mu: Vector3::new(-0.2, 0.1, 0.0),
            ..blob.clone()
        };
        let targets = vec![
            render(&[blob], &cam, [0.0; 3]).unwrap().color,
            render(&[moved], &cam, [0.0; 3]).unwrap().color,
        ];
        let cfg = LdrmConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let latent = LatentGrid::random(2, 8, 8, 8, &mut rng).unwrap();
        let cams = vec![cam.clone(), cam];
        let pose = LatentGrid::from_cameras(&cams, 8, 8).unwrap();
        let mut model = Ldrm::new(cfg).unwrap();
        let report = overfit(
            &mut model,
            &latent,
            &pose,
            &cams,
            &[0.0, 1.0],
            &targets,
            &OverfitConfig {
                steps: 60,
                ..OverfitConfig::default()
            },
        )
        .unwrap();
        assert!(report.losses.last().unwrap() < &(0.7 * report.initial()), "{:?}", report.losses);
    }
}
