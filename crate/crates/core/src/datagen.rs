//! Procedural 4D scenes with exact ground truth (a Gaussian field, rendered
//! color and depth per view and frame, per-Gaussian 3D tracks) and
//! scale-and-shift alignment of relative depth maps to metric anchors.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_ray_unchecked, Camera, FrameRecord};
use crate::error::{Error, Result};
use crate::formats::{read_depth, read_g4d, read_png, read_rawt, write_atomic, write_depth, write_g4d, write_png, write_rawt};
use crate::gaussian::{deform, DeformationDelta, GaussianField, GaussianPrimitive};
use crate::raster::render;
use crate::tensor::Image;

pub const BACKGROUND: [f64; 3] = [0.1, 0.1, 0.1];
pub const DEFAULT_VIEWS: usize = 5;
pub const REPROJECTION_THRESHOLD_PX: f64 = 1.0;
pub const MANIFEST_FILE: &str = "manifest.json";
const RIG_RADIUS: f64 = 4.0;
const RIG_HEIGHT: f64 = -0.8;
const RIG_SPREAD_DEG: f64 = 40.0;
const SHELL_POINTS: usize = 160;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    OrbitingSpheres,
    MovingSpheres,
    StaticRoom,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::OrbitingSpheres, Preset::MovingSpheres, Preset::StaticRoom];

    pub fn name(self) -> &'static str {
        match self {
            Preset::OrbitingSpheres => "orbiting-spheres",
            Preset::MovingSpheres => "moving-spheres",
            Preset::StaticRoom => "static-room",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

/// Scripted rigid motion of one object, per frame index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Motion {
    Static,
    /// Constant displacement `velocity` per frame.
    Linear { velocity: [f64; 3] },
    /// The object's center circles `pivot` about the vertical axis by `step`
    /// radians per frame; the object itself translates without spinning.
    Orbit { pivot: [f64; 3], step: f64 },
}

impl Motion {
    /// Displacement of the object from frame 0 to frame `k`.
    pub fn displacement(&self, center: &Vector3<f64>, k: usize) -> Vector3<f64> {
        match *self {
            Motion::Static => Vector3::zeros(),
            Motion::Linear { velocity } => Vector3::from(velocity) * k as f64,
            Motion::Orbit { pivot, step } => {
                let pivot = Vector3::from(pivot);
                let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), step * k as f64);
                rot * (center - pivot) - (center - pivot)
            }
        }
    }
}

/// A contiguous range of Gaussians that moves rigidly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub start: usize,
    pub end: usize,
    pub center: [f64; 3],
    pub motion: Motion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub camera: FrameRecord,
    pub held_out: bool,
    pub colors: Vec<String>,
    pub depths: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub preset: Preset,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub background: [f64; 3],
    pub timestamps: Vec<f64>,
    pub views: Vec<ViewRecord>,
    /// `T × M × 3` RAWT of world positions.
    pub tracks: String,
    pub track_count: usize,
    /// Tracks whose reprojection residual stays under the threshold.
    pub track_valid: Vec<bool>,
    pub reprojection_threshold_px: f64,
    pub objects: Vec<SceneObject>,
    /// Ground-truth field as G4D.
    pub field: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewData {
    pub camera: Camera,
    pub held_out: bool,
    /// One color image per frame.
    pub colors: Vec<Image>,
    /// One expected-depth map per frame.
    pub depths: Vec<Image>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub manifest: Manifest,
    pub views: Vec<ViewData>,
    /// `tracks[t][i]` is the world position of Gaussian `i` at frame `t`.
    pub tracks: Vec<Vec<Vector3<f64>>>,
    pub field: GaussianField,
}

impl SceneBundle {
    pub fn frames(&self) -> usize {
        self.manifest.frames
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.manifest.timestamps
    }

    pub fn train_views(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|&v| !self.views[v].held_out).collect()
    }

    pub fn held_out_views(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|&v| self.views[v].held_out).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.manifest.frames;
        if t == 0 || self.views.is_empty() {
            return Err(Error::InsufficientData("scene has no frames or views".into()));
        }
        if self.manifest.timestamps.len() != t || self.tracks.len() != t || self.field.frame_count() != t {
            return Err(Error::Shape("frame counts disagree across the bundle".into()));
        }
        for (v, view) in self.views.iter().enumerate() {
            if view.colors.len() != t || view.depths.len() != t {
                return Err(Error::Shape(format!("view {v} does not have {t} frames")));
            }
            for (c, d) in view.colors.iter().zip(&view.depths) {
                if c.width != view.camera.width || c.height != view.camera.height || !c.same_shape(&Image::new(c.width, c.height, 3)) {
                    return Err(Error::Shape(format!("view {v} color does not match its camera")));
                }
                if d.width != c.width || d.height != c.height || d.channels != 1 {
                    return Err(Error::Shape(format!("view {v} depth does not match its color")));
                }
                if d.data.iter().any(|&z| !(z >= 0.0)) {
                    return Err(Error::RejectedInput(format!("view {v} has a negative depth")));
                }
            }
        }
        let m = self.manifest.track_count;
        if self.tracks.iter().any(|r| r.len() != m) || self.manifest.track_valid.len() != m {
            return Err(Error::Shape("track rows disagree with the track count".into()));
        }
        Ok(())
    }

    /// Writes the bundle under `dir` (created if missing); every file is
    /// written atomically.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        for v in 0..self.views.len() {
            fs::create_dir_all(dir.join(format!("view{v}")))?;
        }
        for (v, view) in self.views.iter().enumerate() {
            let rec = &self.manifest.views[v];
            for t in 0..self.frames() {
                write_png(&dir.join(&rec.colors[t]), &view.colors[t])?;
                write_depth(&dir.join(&rec.depths[t]), &view.depths[t])?;
            }
        }
        let m = self.manifest.track_count;
        let flat: Vec<f64> = self.tracks.iter().flatten().flat_map(|p| [p.x, p.y, p.z]).collect();
        write_rawt(&dir.join(&self.manifest.tracks), &[self.frames(), m, 3], &flat)?;
        write_g4d(&dir.join(&self.manifest.field), &self.field)?;
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::data("manifest", e.to_string()))?;
        write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())
    }

    /// Reads a bundle written by [`SceneBundle::write`]. Colors come back
    /// at 8-bit precision and depths, tracks and the field at `f32`
    /// precision.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
            Error::data(
                format!("{} line {} column {}", path.display(), e.line(), e.column()),
                e.to_string(),
            )
        })?;
        let mut views = Vec::with_capacity(manifest.views.len());
        for (v, rec) in manifest.views.iter().enumerate() {
            let camera = rec
                .camera
                .to_camera()
                .map_err(|e| Error::data(format!("$.views[{v}].camera"), e.to_string()))?;
            let colors = rec.colors.iter().map(|p| read_png(&dir.join(p))).collect::<Result<Vec<_>>>()?;
            let depths = rec.depths.iter().map(|p| read_depth(&dir.join(p))).collect::<Result<Vec<_>>>()?;
            views.push(ViewData {
                camera,
                held_out: rec.held_out,
                colors,
                depths,
            });
        }
        let raw = read_rawt(&dir.join(&manifest.tracks))?;
        if raw.dims != [manifest.frames, manifest.track_count, 3] {
            return Err(Error::data("$.tracks", format!("track block has dims {:?}", raw.dims)));
        }
        let values = raw.to_f64();
        let tracks = values
            .chunks(manifest.track_count * 3)
            .map(|row| row.chunks(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect())
            .collect();
        let field = read_g4d(&dir.join(&manifest.field))?;
        let bundle = Self {
            manifest,
            views,
            tracks,
            field,
        };
        bundle.validate().map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
        Ok(bundle)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub preset: Preset,
    pub frames: usize,
    pub res: usize,
    pub seed: u64,
    pub views: usize,
    /// Held-out view indices; the middle view when `None`.
    pub held_out: Option<Vec<usize>>,
}

impl SceneConfig {
    pub fn new(preset: Preset, frames: usize, res: usize, seed: u64) -> Self {
        Self {
            preset,
            frames,
            res,
            seed,
            views: DEFAULT_VIEWS,
            held_out: None,
        }
    }
}

pub fn generate_scene(preset: Preset, frames: usize, res: usize, seed: u64) -> Result<SceneBundle> {
    generate(&SceneConfig::new(preset, frames, res, seed))
}

pub fn generate(config: &SceneConfig) -> Result<SceneBundle> {
    if config.frames == 0 {
        return Err(Error::Config("a scene needs at least one frame".into()));
    }
    if config.res < 16 {
        return Err(Error::Config(format!("resolution {} is below 16", config.res)));
    }
    if config.views == 0 {
        return Err(Error::Config("a scene needs at least one view".into()));
    }
    let held: Vec<usize> = config.held_out.clone().unwrap_or_else(|| {
        if config.views >= 3 {
            vec![config.views / 2]
        } else {
            Vec::new()
        }
    });
    if held.iter().any(|&v| v >= config.views) || held.len() >= config.views {
        return Err(Error::Config("held-out views must leave at least one training view".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (canonical, objects) = build_objects(config.preset, &mut rng);
    let t = config.frames;
    let timestamps: Vec<f64> = if t == 1 {
        vec![0.0]
    } else {
        (0..t).map(|k| k as f64 / (t - 1) as f64).collect()
    };
    let mut deltas = vec![vec![DeformationDelta::IDENTITY; canonical.len()]; t];
    for obj in &objects {
        let c = Vector3::from(obj.center);
        for (k, row) in deltas.iter_mut().enumerate() {
            let d = obj.motion.displacement(&c, k);
            for delta in &mut row[obj.start..obj.end] {
                *delta = DeformationDelta::translation(d);
            }
        }
    }
    let tracks: Vec<Vec<Vector3<f64>>> = deltas
        .iter()
        .map(|row| canonical.iter().zip(row).map(|(p, d)| p.mu + d.d_mu).collect())
        .collect();
    let field = if t == 1 {
        GaussianField::new_static(canonical)?
    } else {
        GaussianField::new_dynamic(canonical, deltas, timestamps.clone())?
    };

    let cameras = rig(config.views, config.res)?;
    let mut views = Vec::with_capacity(cameras.len());
    let mut records = Vec::with_capacity(cameras.len());
    for (v, cam) in cameras.into_iter().enumerate() {
        let mut colors = Vec::with_capacity(t);
        let mut depths = Vec::with_capacity(t);
        for k in 0..t {
            let out = render(&deform(&field, k)?, &cam, BACKGROUND)?;
            colors.push(out.color);
            depths.push(out.depth);
        }
        records.push(ViewRecord {
            camera: FrameRecord::from_camera(&cam, 0.0),
            held_out: held.contains(&v),
            colors: (0..t).map(|k| format!("view{v}/color_{k:03}.png")).collect(),
            depths: (0..t).map(|k| format!("view{v}/depth_{k:03}.rawt")).collect(),
        });
        views.push(ViewData {
            camera: cam,
            held_out: held.contains(&v),
            colors,
            depths,
        });
    }
    let track_valid = track_validity(&views, &tracks, &held);
    let manifest = Manifest {
        format: 1,
        preset: config.preset,
        frames: t,
        width: config.res,
        height: config.res,
        seed: config.seed,
        background: BACKGROUND,
        timestamps,
        views: records,
        tracks: "tracks.rawt".into(),
        track_count: field.len(),
        track_valid,
        reprojection_threshold_px: REPROJECTION_THRESHOLD_PX,
        objects,
        field: "field.g4d".into(),
    };
    let bundle = SceneBundle {
        manifest,
        views,
        tracks,
        field,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Cameras on a horizontal arc around the origin, slightly above it.
pub fn rig(views: usize, res: usize) -> Result<Vec<Camera>> {
    (0..views)
        .map(|v| {
            let phi = if views == 1 {
                0.0
            } else {
                (-RIG_SPREAD_DEG + 2.0 * RIG_SPREAD_DEG * v as f64 / (views - 1) as f64).to_radians()
            };
            let eye = Vector3::new(RIG_RADIUS * phi.sin(), RIG_HEIGHT, -RIG_RADIUS * phi.cos());
            Camera::look_at(eye, Vector3::zeros(), res, res, 1.0)
        })
        .collect()
}

/// Points on a sphere by the golden-angle spiral.
pub fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let a = golden * i as f64;
            Vector3::new(r * a.cos(), y, r * a.sin())
        })
        .collect()
}

fn shell(center: Vector3<f64>, radius: f64, rgb: [f64; 3]) -> Vec<GaussianPrimitive> {
    let spacing = (4.0 * PI * radius * radius / SHELL_POINTS as f64).sqrt();
    let light = Vector3::new(-0.4, -0.8, -0.45).normalize();
    fibonacci_sphere(SHELL_POINTS)
        .into_iter()
        .map(|n| {
            let shade = 0.75 + 0.25 * n.dot(&light);
            GaussianPrimitive::isotropic(center + n * radius, 0.6 * spacing, 3.0, rgb.map(|c| c * shade))
        })
        .collect()
}

fn plane(origin: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, nu: usize, nv: usize, rgb: [f64; 3]) -> Vec<GaussianPrimitive> {
    let step = (u.norm() / nu as f64).max(v.norm() / nv as f64);
    let mut out = Vec::with_capacity(nu * nv);
    for j in 0..nv {
        for i in 0..nu {
            let a = (i as f64 + 0.5) / nu as f64;
            let b = (j as f64 + 0.5) / nv as f64;
            let checker = if (i / 2 + j / 2) % 2 == 0 { 1.0 } else { 0.8 };
            out.push(GaussianPrimitive::isotropic(
                origin + u * a + v * b,
                0.6 * step,
                3.0,
                rgb.map(|c| c * checker),
            ));
        }
    }
    out
}

fn jitter_color(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [f64; 3] {
    base.map(|c: f64| (c + rng.random_range(-0.08..0.08)).clamp(0.05, 0.95))
}

fn push_object(
    prims: &mut Vec<GaussianPrimitive>,
    objects: &mut Vec<SceneObject>,
    name: &str,
    center: Vector3<f64>,
    motion: Motion,
    items: Vec<GaussianPrimitive>,
) {
    let start = prims.len();
    prims.extend(items);
    objects.push(SceneObject {
        name: name.into(),
        start,
        end: prims.len(),
        center: center.into(),
        motion,
    });
}

fn build_objects(preset: Preset, rng: &mut ChaCha8Rng) -> (Vec<GaussianPrimitive>, Vec<SceneObject>) {
    let mut prims = Vec::new();
    let mut objects = Vec::new();
    let palette = [[0.85, 0.25, 0.2], [0.25, 0.75, 0.3], [0.25, 0.4, 0.9]];
    match preset {
        Preset::OrbitingSpheres => {
            let phase = rng.random_range(0.0..2.0 * PI / 3.0);
            for (k, base) in palette.iter().enumerate() {
                let a = phase + 2.0 * PI * k as f64 / 3.0;
                let center = Vector3::new(0.9 * a.cos(), 0.0, 0.9 * a.sin());
                let radius = rng.random_range(0.38..0.48);
                let motion = Motion::Orbit {
                    pivot: [0.0; 3],
                    step: 0.12,
                };
                let items = shell(center, radius, jitter_color(rng, *base));
                push_object(&mut prims, &mut objects, &format!("sphere{k}"), center, motion, items);
            }
        }
        Preset::MovingSpheres => {
            let starts = [
                Vector3::new(-0.7, 0.0, 0.0),
                Vector3::new(0.6, -0.2, 0.3),
                Vector3::new(0.0, 0.4, -0.4),
            ];
            for (k, (base, c)) in palette.iter().zip(starts).enumerate() {
                let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(-1.0..1.0));
                let velocity = dir.normalize() * 0.06;
                let center = c + Vector3::new(rng.random_range(-0.1..0.1), 0.0, rng.random_range(-0.1..0.1));
                let radius = rng.random_range(0.32..0.42);
                let items = shell(center, radius, jitter_color(rng, *base));
                let motion = Motion::Linear {
                    velocity: velocity.into(),
                };
                push_object(&mut prims, &mut objects, &format!("sphere{k}"), center, motion, items);
            }
        }
        Preset::StaticRoom => {
            let wall = jitter_color(rng, [0.7, 0.65, 0.55]);
            let floor = jitter_color(rng, [0.45, 0.5, 0.6]);
            let items = plane(
                Vector3::new(-2.0, -1.6, 1.5),
                Vector3::new(4.0, 0.0, 0.0),
                Vector3::new(0.0, 2.4, 0.0),
                20,
                12,
                wall,
            );
            push_object(&mut prims, &mut objects, "wall", Vector3::new(0.0, -0.4, 1.5), Motion::Static, items);
            let items = plane(
                Vector3::new(-2.0, 0.8, -1.5),
                Vector3::new(4.0, 0.0, 0.0),
                Vector3::new(0.0, 0.0, 3.0),
                20,
                15,
                floor,
            );
            push_object(&mut prims, &mut objects, "floor", Vector3::new(0.0, 0.8, 0.0), Motion::Static, items);
            let center = Vector3::new(rng.random_range(-0.4..0.4), 0.35, rng.random_range(-0.3..0.3));
            let items = shell(center, 0.45, jitter_color(rng, palette[0]));
            push_object(&mut prims, &mut objects, "sphere0", center, Motion::Static, items);
        }
    }
    (prims, objects)
}

/// A track is valid when, at every frame, back-projecting the rendered
/// surface under its pixel in the first training view and reprojecting into
/// the last training view lands within the threshold of the track's own
/// projection there.
fn track_validity(views: &[ViewData], tracks: &[Vec<Vector3<f64>>], held: &[usize]) -> Vec<bool> {
    let train: Vec<usize> = (0..views.len()).filter(|v| !held.contains(v)).collect();
    let m = tracks.first().map_or(0, Vec::len);
    let (Some(&a), Some(&b)) = (train.first(), train.last()) else {
        return vec![false; m];
    };
    let (src, dst) = (&views[a], &views[b]);
    (0..m)
        .map(|i| {
            tracks.iter().enumerate().all(|(k, row)| {
                reprojection_residual(src, dst, k, &row[i]).is_some_and(|r| r < REPROJECTION_THRESHOLD_PX)
            })
        })
        .collect()
}

fn reprojection_residual(src: &ViewData, dst: &ViewData, k: usize, p: &Vector3<f64>) -> Option<f64> {
    let cam = &src.camera;
    let (u, v, z) = cam.project(p);
    if !(z > 0.0 && u >= 0.0 && v >= 0.0 && u < cam.width as f64 && v < cam.height as f64) {
        return None;
    }
    let (px, py) = (u.floor() as usize, v.floor() as usize);
    let depth = src.depths[k].get(px, py, 0);
    if !(depth > 0.0) {
        return None;
    }
    // Back-project along the track's own sub-pixel ray so the residual only
    // measures depth disagreement (occlusion), not pixel quantization.
    let (o, d) = pixel_ray_unchecked(cam, u, v);
    let d_cam_z = (cam.world_to_cam.rotation * d).z;
    let surface = o + d * (depth / d_cam_z);
    let (u1, v1, z1) = dst.camera.project(&surface);
    let (u2, v2, z2) = dst.camera.project(p);
    if !(z1 > 0.0 && z2 > 0.0) {
        return None;
    }
    Some(((u1 - u2).powi(2) + (v1 - v2).powi(2)).sqrt())
}

/// Non-overlapping silhouettes of each object in view `v` at frame `k`: a
/// pixel belongs to the nearest object whose own render covers it with
/// alpha above one half.
pub fn object_masks(bundle: &SceneBundle, v: usize, k: usize) -> Result<Vec<Vec<bool>>> {
    let cam = &bundle.views.get(v).ok_or_else(|| Error::Range(format!("view {v}")))?.camera;
    let prims = deform(&bundle.field, k)?;
    let n = cam.width * cam.height;
    let mut best = vec![(f64::INFINITY, usize::MAX); n];
    for (o, obj) in bundle.manifest.objects.iter().enumerate() {
        let out = render(&prims[obj.start..obj.end], cam, [0.0; 3])?;
        for (i, b) in best.iter_mut().enumerate() {
            let a = out.alpha.data[i];
            if a > 0.5 {
                let z = out.depth.data[i] / a;
                if z < b.0 {
                    *b = (z, o);
                }
            }
        }
    }
    Ok((0..bundle.manifest.objects.len())
        .map(|o| best.iter().map(|&(_, id)| id == o).collect())
        .filter(|m: &Vec<bool>| m.iter().any(|&x| x))
        .collect())
}

/// Pairs of (relative depth, metric depth) used to fit scale and shift.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub pairs: Vec<(f64, f64)>,
}

/// Measurements that are finite and strictly positive count as valid.
pub fn is_valid_measurement(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// One anchor per mask with a valid oracle reading: the median relative
/// depth over the mask against the oracle's metric depth.
pub fn extract_anchors(rel_depth: &Image, masks: &[Vec<bool>], oracle: impl Fn(&[bool]) -> f64) -> Result<AnchorSet> {
    let n = rel_depth.width * rel_depth.height;
    if rel_depth.channels != 1 {
        return Err(Error::Shape(format!("relative depth has {} channels", rel_depth.channels)));
    }
    let mut used = vec![false; n];
    for (k, m) in masks.iter().enumerate() {
        if m.len() != n {
            return Err(Error::Shape(format!("mask {k} has {} pixels, map has {n}", m.len())));
        }
        if !m.iter().any(|&x| x) {
            return Err(Error::RejectedInput(format!("mask {k} is empty")));
        }
        for (u, &x) in used.iter_mut().zip(m) {
            if x && *u {
                return Err(Error::RejectedInput(format!("mask {k} overlaps an earlier mask")));
            }
            *u |= x;
        }
    }
    let mut anchors = AnchorSet::default();
    for m in masks {
        let gt = oracle(m);
        if !is_valid_measurement(gt) {
            continue;
        }
        let mut vals: Vec<f64> = rel_depth.data.iter().zip(m).filter(|(_, &x)| x).map(|(&v, _)| v).collect();
        if let Some(d) = median(&mut vals) {
            anchors.pairs.push((d, gt));
        }
    }
    if anchors.pairs.is_empty() {
        return Err(Error::InsufficientData("no mask produced a valid metric reading".into()));
    }
    Ok(anchors)
}

/// Least-squares scale and shift `(s, t)` minimizing `Σ (s·d_rel + t − d_gt)²`.
pub fn solve_scale_shift(anchors: &AnchorSet) -> Result<(f64, f64)> {
    let pairs = &anchors.pairs;
    if pairs.len() < 2 {
        return Err(Error::InsufficientData(format!("{} anchors, need at least 2", pairs.len())));
    }
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::RejectedInput("anchor values must be finite".into()));
    }
    if pairs.iter().all(|p| p.0 == pairs[0].0) {
        return Err(Error::DegenerateSolve("all anchors share one relative depth".into()));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::DegenerateSolve("relative depths have no spread".into()));
    }
    let s = sxy / sxx;
    Ok((s, my - s * mx))
}

/// Aligns a relative depth map to the anchors: returns `s*·rel + t*` and
/// `(s*, t*)`.
pub fn align_depth(rel_depth: &Image, anchors: &AnchorSet) -> Result<(Image, f64, f64)> {
    let (s, t) = solve_scale_shift(anchors)?;
    let out = Image {
        data: rel_depth.data.iter().map(|&d| s * d + t).collect(),
        ..rel_depth.clone()
    };
    Ok((out, s, t))
}
