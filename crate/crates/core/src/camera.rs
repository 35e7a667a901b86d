//! Pinhole cameras, Plücker ray maps, evaluation trajectories and the
//! relative pose error.
//!
//! Conventions: x right, y down, z forward; pixel `(i, j)` has its center at
//! `(i + 0.5, j + 0.5)`. Poses are stored world-to-camera.

use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Rigid transform `x ↦ R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// `self⁻¹ ∘ other`, evaluated without forming the inverse explicitly so
    /// that identical inputs give an exact identity.
    pub fn between(&self, other: &Pose) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(
            rt * other.rotation,
            rt * (other.translation - self.translation),
        )
    }

    /// Rotation angle in radians, robust near zero.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let skew = Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        );
        let sin = 0.5 * skew.norm();
        let cos = 0.5 * (r.trace() - 1.0);
        sin.atan2(cos)
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Matrix3::identity()).abs().max() <= tol && (r.determinant() - 1.0).abs() <= tol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_cam: Pose,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_to_cam: Pose,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_cam,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, principal point at the image
    /// center, focal length `focal_scale · width` pixels.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        width: usize,
        height: usize,
        focal_scale: f64,
    ) -> Result<Self> {
        let f = width as f64 * focal_scale;
        Self::new(
            f,
            f,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            look_at_pose(&eye, &target)?,
        )
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite(&[self.fx, self.fy, self.cx, self.cy], "intrinsics")?;
        ensure_finite(self.world_to_cam.rotation.as_slice(), "rotation")?;
        ensure_finite(self.world_to_cam.translation.as_slice(), "translation")?;
        if self.width == 0 || self.height == 0 {
            return Err(Error::RejectedInput("camera has an empty image".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::RejectedInput("focal lengths must be positive".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::RejectedInput("principal point outside the image".into()));
        }
        if !self.world_to_cam.is_rigid(1e-9) {
            return Err(Error::RejectedInput("camera rotation is not a proper rotation".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        let p = &self.world_to_cam;
        -(p.rotation.transpose() * p.translation)
    }

    pub fn cam_to_world(&self) -> Pose {
        self.world_to_cam.inverse()
    }

    /// Projects a world point to `(u, v, z_view)`.
    pub fn project(&self, x: &Vector3<f64>) -> (f64, f64, f64) {
        let p = self.world_to_cam.apply(x);
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
            p.z,
        )
    }

    /// Same camera with the image resampled by `factor` (e.g. 0.5 halves the
    /// resolution).
    pub fn scaled(&self, factor: f64) -> Camera {
        let width = ((self.width as f64 * factor).round() as usize).max(1);
        let height = ((self.height as f64 * factor).round() as usize).max(1);
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            world_to_cam: self.world_to_cam,
        }
    }

    /// The same physical camera after the world is moved by `g`.
    pub fn transformed(&self, g: &Pose) -> Camera {
        Camera {
            world_to_cam: self.world_to_cam.compose(&g.inverse()),
            ..self.clone()
        }
    }
}

/// World-to-camera pose of a camera at `eye` looking at `target`, with the
/// image y axis pointing along world +y (down).
pub fn look_at_pose(eye: &Vector3<f64>, target: &Vector3<f64>) -> Result<Pose> {
    let f = target - eye;
    let n = f.norm();
    if !(n > 1e-9) {
        return Err(Error::Config("camera coincides with its look-at target".into()));
    }
    let z = f / n;
    let down = Vector3::new(0.0, 1.0, 0.0);
    let x = down.cross(&z);
    let xn = x.norm();
    if xn < 1e-9 {
        return Err(Error::Config("viewing direction is vertical".into()));
    }
    let x = x / xn;
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Ok(Pose::new(r, -(r * eye)))
}

/// World-space ray through continuous pixel coordinates `(u, v)`.
pub fn pixel_ray(cam: &Camera, u: f64, v: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
    if !(u >= 0.0 && u < cam.width as f64 && v >= 0.0 && v < cam.height as f64) {
        return Err(Error::Range(format!(
            "pixel ({u}, {v}) outside {}x{}",
            cam.width, cam.height
        )));
    }
    Ok(pixel_ray_unchecked(cam, u, v))
}

pub(crate) fn pixel_ray_unchecked(cam: &Camera, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
    let d_cam = Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
    let d = cam.world_to_cam.rotation.transpose() * d_cam;
    (cam.center(), d.normalize())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub cameras: Vec<Camera>,
    pub timestamps: Vec<f64>,
}

impl Trajectory {
    pub fn new(cameras: Vec<Camera>, timestamps: Vec<f64>) -> Result<Self> {
        let traj = Self {
            cameras,
            timestamps,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::InsufficientData("empty trajectory".into()));
        }
        if self.cameras.len() != self.timestamps.len() {
            return Err(Error::Shape(format!(
                "{} cameras but {} timestamps",
                self.cameras.len(),
                self.timestamps.len()
            )));
        }
        if self.timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::RejectedInput("timestamps must be strictly increasing".into()));
        }
        if self.timestamps.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::RejectedInput("timestamps must lie in [0,1]".into()));
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Moves the world by `g` (every camera-to-world pose is left-multiplied).
    pub fn transformed(&self, g: &Pose) -> Trajectory {
        Trajectory {
            cameras: self.cameras.iter().map(|c| c.transformed(g)).collect(),
            timestamps: self.timestamps.clone(),
        }
    }
}

/// Per-pixel `(d, m)` with unit direction `d` and moment `m = o × d`, stored
/// `T × H × W × 6`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlueckerMap {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PlueckerMap {
    pub fn at(&self, t: usize, y: usize, x: usize) -> &[f64] {
        let i = ((t * self.height + y) * self.width + x) * 6;
        &self.data[i..i + 6]
    }
}

pub fn pluecker_embed(traj: &Trajectory) -> Result<PlueckerMap> {
    let first = traj
        .cameras
        .first()
        .ok_or_else(|| Error::InsufficientData("empty trajectory".into()))?;
    let (w, h) = (first.width, first.height);
    if traj.cameras.iter().any(|c| c.width != w || c.height != h) {
        return Err(Error::Shape("trajectory cameras differ in resolution".into()));
    }
    let mut data = Vec::with_capacity(traj.len() * w * h * 6);
    for cam in &traj.cameras {
        for y in 0..h {
            for x in 0..w {
                let (o, d) = pixel_ray_unchecked(cam, x as f64 + 0.5, y as f64 + 0.5);
                let m = o.cross(&d);
                data.extend_from_slice(d.as_slice());
                data.extend_from_slice(m.as_slice());
            }
        }
    }
    Ok(PlueckerMap {
        frames: traj.len(),
        height: h,
        width: w,
        data,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Spiral,
    Forward,
    Backward,
    Upward,
    Downward,
}

impl FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spiral" => Ok(Self::Spiral),
            "forward" => Ok(Self::Forward),
            "backward" => Ok(Self::Backward),
            "upward" => Ok(Self::Upward),
            "downward" => Ok(Self::Downward),
            other => Err(Error::Config(format!("unknown trajectory kind `{other}`"))),
        }
    }
}

/// Shared preset for the trajectory generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryParams {
    /// Orbit radius; also the distance from the first camera to the target.
    pub radius: f64,
    /// Full turns of the spiral over the whole sequence.
    pub turns: f64,
    /// Peak vertical drift of the spiral.
    pub amplitude: f64,
    /// Per-frame step of the linear kinds.
    pub step: f64,
    pub target: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub focal_scale: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            radius: 2.0,
            turns: 1.0,
            amplitude: 0.2,
            step: 0.2,
            target: [0.0; 3],
            width: 64,
            height: 64,
            focal_scale: 1.0,
        }
    }
}

pub fn make_trajectory(kind: TrajectoryKind, frames: usize, params: &TrajectoryParams) -> Result<Trajectory> {
    if frames < 2 {
        return Err(Error::Config(format!("need at least 2 frames, got {frames}")));
    }
    let target = Vector3::from(params.target);
    // The first camera sits `radius` in front of the target along −z.
    let start = target - Vector3::new(0.0, 0.0, params.radius);
    let first = look_at_pose(&start, &target)?;
    let first_c2w = first.inverse().rotation;
    let last = (frames - 1) as f64;

    let mut cameras = Vec::with_capacity(frames);
    for k in 0..frames {
        let eye = match kind {
            TrajectoryKind::Spiral => {
                // Reduce the phase before scaling so a whole number of turns
                // reproduces the first pose bit for bit.
                let phase = (params.turns * k as f64 / last).fract();
                let theta = 2.0 * PI * phase;
                target
                    + Vector3::new(
                        params.radius * theta.sin(),
                        params.amplitude * theta.sin(),
                        -params.radius * theta.cos(),
                    )
            }
            linear => {
                let s = k as f64 * params.step;
                let local = match linear {
                    TrajectoryKind::Forward => Vector3::new(0.0, 0.0, -s),
                    TrajectoryKind::Backward => Vector3::new(0.0, 0.0, s),
                    TrajectoryKind::Upward => Vector3::new(0.0, -s, 0.0),
                    TrajectoryKind::Downward => Vector3::new(0.0, s, 0.0),
                    TrajectoryKind::Spiral => unreachable!(),
                };
                start + first_c2w * local
            }
        };
        cameras.push(Camera::look_at(
            eye,
            target,
            params.width,
            params.height,
            params.focal_scale,
        )?);
    }
    let timestamps = (0..frames).map(|k| k as f64 / last).collect();
    Trajectory::new(cameras, timestamps)
}

/// Relative pose error over consecutive frames: RMSE of the translation
/// magnitude and of the rotation angle (degrees) of `Δ_ref⁻¹ · Δ_est`.
pub fn rpe(reference: &Trajectory, estimate: &Trajectory) -> Result<(f64, f64)> {
    if reference.len() != estimate.len() {
        return Err(Error::Shape(format!(
            "trajectories have {} and {} frames",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.len() < 2 {
        return Err(Error::InsufficientData("RPE needs at least two frames".into()));
    }
    let steps = |traj: &Trajectory| -> Vec<Pose> {
        traj.cameras
            .windows(2)
            .map(|w| w[0].cam_to_world().between(&w[1].cam_to_world()))
            .collect()
    };
    let (r, e) = (steps(reference), steps(estimate));
    let n = r.len() as f64;
    let mut t2 = 0.0;
    let mut a2 = 0.0;
    for (dr, de) in r.iter().zip(&e) {
        let err = dr.between(de);
        t2 += err.translation.norm_squared();
        a2 += err.rotation_angle().to_degrees().powi(2);
    }
    Ok(((t2 / n).sqrt(), (a2 / n).sqrt()))
}

/// On-disk trajectory frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: usize,
    pub h: usize,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub tvec: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub frames: Vec<FrameRecord>,
}

impl FrameRecord {
    pub fn from_camera(cam: &Camera, t: f64) -> Self {
        let r = &cam.world_to_cam.rotation;
        Self {
            t,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            w: cam.width,
            h: cam.height,
            r: std::array::from_fn(|i| r[(i / 3, i % 3)]),
            tvec: cam.world_to_cam.translation.into(),
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        let r = Matrix3::from_row_slice(&self.r);
        Camera::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.w,
            self.h,
            Pose::new(r, Vector3::from(self.tvec)),
        )
    }
}

impl TrajectoryFile {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        Self {
            frames: traj
                .cameras
                .iter()
                .zip(&traj.timestamps)
                .map(|(c, &t)| FrameRecord::from_camera(c, t))
                .collect(),
        }
    }

    pub fn to_trajectory(&self) -> Result<Trajectory> {
        let cameras = self
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                f.to_camera().map_err(|e| Error::data(format!("$.frames[{i}]"), e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(cameras, self.frames.iter().map(|f| f.t).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            Error::data(format!("line {} column {}", e.line(), e.column()), e.to_string())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Quat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_pose(rng: &mut impl Rng) -> Pose {
        let q = Quat(std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .normalized()
            .unwrap();
        Pose::new(
            q.to_rotation(),
            Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
        )
    }

    fn simple_cam(pose: Pose) -> Camera {
        Camera::new(20.0, 22.0, 16.0, 12.0, 32, 24, pose).unwrap()
    }

    #[test]
    fn pixel_ray_examples() {
        let cam = simple_cam(Pose::identity());
        let (o, d) = pixel_ray(&cam, cam.cx, cam.cy).unwrap();
        assert_eq!(o, Vector3::zeros());
        assert!((d - Vector3::z()).norm() < 1e-15);
        let (_, d) = pixel_ray(&cam, cam.cx + 0.5 * cam.fx, cam.cy).unwrap();
        assert!((d - Vector3::new(0.5, 0.0, 1.0).normalize()).norm() < 1e-15);
        assert!(matches!(pixel_ray(&cam, 32.0, 0.0), Err(Error::Range(_))));
        assert!(matches!(pixel_ray(&cam, -0.1, 0.0), Err(Error::Range(_))));
    }

    #[test]
    fn pixel_ray_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let cam = simple_cam(random_pose(&mut rng));
            let u = rng.random_range(0.0..32.0);
            let v = rng.random_range(0.0..24.0);
            let (o, d) = pixel_ray(&cam, u, v).unwrap();
            for lambda in [1.0, 10.0] {
                let (pu, pv, z) = cam.project(&(o + d * lambda));
                assert!(z > 0.0);
                assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pluecker_at_origin_has_zero_moment() {
        let traj = Trajectory::new(vec![simple_cam(Pose::identity())], vec![0.0]).unwrap();
        let map = pluecker_embed(&traj).unwrap();
        assert_eq!(map.data.len(), 24 * 32 * 6);
        for px in map.data.chunks(6) {
            assert_eq!(&px[3..], &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn pluecker_moment_by_hand() {
        // Camera centered at (1, 2, 3) with identity rotation.
        let pose = Pose::from_translation(Vector3::new(-1.0, -2.0, -3.0));
        let cam = Camera::new(10.0, 10.0, 4.5, 4.5, 9, 9, pose).unwrap();
        let map = pluecker_embed(&Trajectory::new(vec![cam], vec![0.0]).unwrap()).unwrap();
        // Pixel (4, 4) has its center on the optical axis: d = (0,0,1),
        // m = (1,2,3) × (0,0,1) = (2·1 − 3·0, 3·0 − 1·1, 0) = (2, −1, 0).
        let px = map.at(0, 4, 4);
        assert!((px[0]).abs() < 1e-15 && (px[1]).abs() < 1e-15 && (px[2] - 1.0).abs() < 1e-15);
        assert!((px[3] - 2.0).abs() < 1e-15 && (px[4] + 1.0).abs() < 1e-15 && px[5].abs() < 1e-15);
    }

    #[test]
    fn pluecker_rays_are_unit_and_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cams: Vec<_> = (0..3).map(|_| simple_cam(random_pose(&mut rng))).collect();
        let traj = Trajectory::new(cams, vec![0.0, 0.5, 1.0]).unwrap();
        let map = pluecker_embed(&traj).unwrap();
        assert_eq!((map.frames, map.height, map.width), (3, 24, 32));
        for px in map.data.chunks(6) {
            let d = Vector3::new(px[0], px[1], px[2]);
            let m = Vector3::new(px[3], px[4], px[5]);
            assert!((d.norm() - 1.0).abs() < 1e-6);
            assert!(d.dot(&m).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_and_upward_offsets() {
        let params = TrajectoryParams {
            step: 1.0,
            ..Default::default()
        };
        let traj = make_trajectory(TrajectoryKind::Forward, 3, &params).unwrap();
        let c0 = traj.cameras[0].center();
        let axis = traj.cameras[0].world_to_cam.rotation.row(2).transpose();
        for (k, cam) in traj.cameras.iter().enumerate() {
            let off = cam.center() - c0;
            assert!((off.dot(&axis) + k as f64).abs() < 1e-12);
            assert!((off - axis * off.dot(&axis)).norm() < 1e-12);
        }

        let params = TrajectoryParams {
            step: 0.5,
            ..Default::default()
        };
        let traj = make_trajectory(TrajectoryKind::Upward, 4, &params).unwrap();
        let c0 = traj.cameras[0].center();
        let ys: Vec<f64> = traj.cameras.iter().map(|c| c.center().y - c0.y).collect();
        for (got, want) in ys.iter().zip([0.0, -0.5, -1.0, -1.5]) {
            assert!((got - want).abs() < 1e-12);
        }
        // Every camera keeps the target on its optical axis.
        for cam in &traj.cameras {
            let (u, v, z) = cam.project(&Vector3::zeros());
            assert!(z > 0.0 && (u - cam.cx).abs() < 1e-9 && (v - cam.cy).abs() < 1e-9);
        }
    }

    #[test]
    fn spiral_closes_exactly() {
        for frames in [2, 5, 16, 33] {
            let traj = make_trajectory(TrajectoryKind::Spiral, frames, &TrajectoryParams::default()).unwrap();
            assert_eq!(traj.cameras[0], traj.cameras[frames - 1]);
            for cam in &traj.cameras {
                assert!(((cam.center() - Vector3::zeros()).xz().norm() - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unknown_kind_and_short_sequences() {
        assert!(matches!("sideways".parse::<TrajectoryKind>(), Err(Error::Config(_))));
        assert!(matches!(
            make_trajectory(TrajectoryKind::Spiral, 1, &TrajectoryParams::default()),
            Err(Error::Config(_))
        ));
        // Backward walks through the target after radius/step frames.
        assert!(make_trajectory(TrajectoryKind::Backward, 12, &TrajectoryParams::default()).is_err());
    }

    fn constant_offset_estimate(reference: &Trajectory, delta: Vector3<f64>) -> Trajectory {
        let offset = Pose::from_translation(delta);
        let mut c2w = reference.cameras[0].cam_to_world();
        let mut cams = vec![reference.cameras[0].clone()];
        for w in reference.cameras.windows(2) {
            let step = w[0].cam_to_world().between(&w[1].cam_to_world());
            c2w = c2w.compose(&step).compose(&offset);
            cams.push(Camera {
                world_to_cam: c2w.inverse(),
                ..w[1].clone()
            });
        }
        Trajectory::new(cams, reference.timestamps.clone()).unwrap()
    }

    #[test]
    fn rpe_examples() {
        let reference = make_trajectory(TrajectoryKind::Spiral, 12, &TrajectoryParams::default()).unwrap();
        assert_eq!(rpe(&reference, &reference).unwrap(), (0.0, 0.0));

        let est = constant_offset_estimate(&reference, Vector3::new(0.1, 0.0, 0.0));
        let (t, r) = rpe(&reference, &est).unwrap();
        assert!((t - 0.1).abs() < 1e-9, "{t}");
        assert!(r.abs() < 1e-6, "{r}");

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let g = random_pose(&mut rng);
        let (t, r) = rpe(&reference, &reference.transformed(&g)).unwrap();
        assert!(t < 1e-9 && r < 1e-6);

        let short = Trajectory::new(reference.cameras[..3].to_vec(), vec![0.0, 0.5, 1.0]).unwrap();
        assert!(matches!(rpe(&reference, &short), Err(Error::Shape(_))));
    }

    #[test]
    fn rpe_is_invariant_to_global_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let a = make_trajectory(TrajectoryKind::Spiral, 8, &TrajectoryParams::default()).unwrap();
        let b = constant_offset_estimate(&a, Vector3::new(0.03, -0.02, 0.05));
        let base = rpe(&a, &b).unwrap();
        for _ in 0..20 {
            let g = random_pose(&mut rng);
            let moved = rpe(&a.transformed(&g), &b.transformed(&g)).unwrap();
            assert!((moved.0 - base.0).abs() < 1e-9);
            assert!((moved.1 - base.1).abs() < 1e-9);
        }
    }

    #[test]
    fn trajectory_json_round_trip() {
        let traj = make_trajectory(TrajectoryKind::Downward, 4, &TrajectoryParams::default()).unwrap();
        let text = TrajectoryFile::from_trajectory(&traj).to_json();
        assert!(text.contains("\"R\""));
        let back = TrajectoryFile::from_json(&text).unwrap().to_trajectory().unwrap();
        assert_eq!(back, traj);
        assert!(matches!(TrajectoryFile::from_json("{\"frames\": 3}"), Err(Error::Data { .. })));
    }
}
