//! Gaussian primitives and the canonical-plus-delta deformation that turns a
//! static set of splats into a 4D field.
//!
//! A primitive stores log-scales and a w-first unit quaternion; the
//! covariance is `R · diag(exp(2·log_scale)) · Rᵀ`. A [`GaussianField`]
//! pairs the canonical (frame 0) primitives with per-timestep
//! [`DeformationDelta`] rows. Deltas are always relative to the canonical
//! frame, never to the previous timestep.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{ensure_finite, Error, Result};

/// Number of scalars in a deformation delta: 3 offset, 4 rotation, 3 scale.
pub const DEFORM_DIM: usize = 10;

/// Per-primitive parameter count excluding color: 3 mu, 3 log-scale, 4 quat,
/// 1 opacity.
pub const GEOMETRY_DIM: usize = 11;

const UNIT_TOL: f64 = 1e-6;

/// Quaternion, w-first, Hamilton convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat(pub [f64; 4]);

impl Quat {
    pub const IDENTITY: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat([w, x, y, z])
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Quat([c, s * a.x, s * a.y, s * a.z])
    }

    pub fn w(&self) -> f64 {
        self.0[0]
    }

    pub fn norm(&self) -> f64 {
        self.as_vector().norm()
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::from(self.0)
    }

    pub fn from_vector(v: Vector4<f64>) -> Self {
        Quat([v[0], v[1], v[2], v[3]])
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOL
    }

    pub fn normalized(&self) -> Result<Quat> {
        let n = self.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::RejectedInput(format!(
                "cannot normalize quaternion {:?}",
                self.0
            )));
        }
        Ok(Quat(self.0.map(|c| c / n)))
    }

    pub fn conjugate(&self) -> Quat {
        let [w, x, y, z] = self.0;
        Quat([w, -x, -y, -z])
    }

    /// Raw Hamilton product without renormalization.
    pub fn hamilton(&self, b: &Quat) -> Quat {
        let [aw, ax, ay, az] = self.0;
        let [bw, bx, by, bz] = b.0;
        Quat([
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ])
    }

    /// Rotation matrix of the normalized quaternion.
    pub fn to_rotation(&self) -> Matrix3<f64> {
        let n = self.norm();
        let [w, x, y, z] = self.0.map(|c| c / n);
        rotation_from_unit([w, x, y, z])
    }

    /// Unit quaternion from a proper rotation matrix (Shepperd's method).
    pub fn from_rotation(r: &Matrix3<f64>) -> Quat {
        let tr = r.trace();
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            [
                0.25 * s,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            ]
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            [
                (r[(2, 1)] - r[(1, 2)]) / s,
                0.25 * s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            ]
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            [
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                0.25 * s,
                (r[(1, 2)] + r[(2, 1)]) / s,
            ]
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            [
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                0.25 * s,
            ]
        };
        Quat(q)
    }
}

/// Rotation matrix of an (assumed) unit quaternion.
pub(crate) fn rotation_from_unit([w, x, y, z]: [f64; 4]) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of `⟨g, R(q̂)⟩` with respect to the raw quaternion `q`, where
/// `q̂ = q / |q|` and `g` is the upstream gradient of the rotation matrix.
pub(crate) fn rotation_vjp(q: &Quat, g: &Matrix3<f64>) -> [f64; 4] {
    let n = q.norm();
    let [w, x, y, z] = q.0.map(|c| c / n);
    // d⟨g,R⟩/dq̂ for each unit component.
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    normalize_vjp(q, [dw, dx, dy, dz])
}

/// Pulls a gradient with respect to `q / |q|` back to `q`.
pub(crate) fn normalize_vjp(q: &Quat, g_unit: [f64; 4]) -> [f64; 4] {
    let n = q.norm();
    let u = q.0.map(|c| c / n);
    let dot: f64 = (0..4).map(|i| u[i] * g_unit[i]).sum();
    std::array::from_fn(|i| (g_unit[i] - u[i] * dot) / n)
}

/// Jacobians of the raw Hamilton product `a ⊗ b` with respect to `a` and `b`.
pub(crate) fn hamilton_jacobians(a: &Quat, b: &Quat) -> (Matrix4<f64>, Matrix4<f64>) {
    let [aw, ax, ay, az] = a.0;
    let [bw, bx, by, bz] = b.0;
    let da = Matrix4::new(
        bw, -bx, -by, -bz, //
        bx, bw, bz, -by, //
        by, -bz, bw, bx, //
        bz, by, -bx, bw,
    );
    let db = Matrix4::new(
        aw, -ax, -ay, -az, //
        ax, aw, -az, ay, //
        ay, az, aw, -ax, //
        az, -ay, ax, aw,
    );
    (da, db)
}

/// Hamilton product renormalized to unit length.
pub fn quat_mul(a: &Quat, b: &Quat) -> Result<Quat> {
    ensure_finite(&a.0, "quaternion")?;
    ensure_finite(&b.0, "quaternion")?;
    if a.norm() == 0.0 || b.norm() == 0.0 {
        return Err(Error::RejectedInput("zero-norm quaternion".into()));
    }
    a.hamilton(b).normalized()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub quat: Quat,
    pub opacity_logit: f64,
    /// Spherical-harmonic coefficients, `3·(deg+1)²` values laid out band
    /// major: `color[3·k + channel]`. Band 0 is the plain RGB color.
    pub color: Vec<f64>,
}

impl GaussianPrimitive {
    pub fn isotropic(mu: Vector3<f64>, scale: f64, opacity_logit: f64, rgb: [f64; 3]) -> Self {
        Self {
            mu,
            log_scale: Vector3::repeat(scale.ln()),
            quat: Quat::IDENTITY,
            opacity_logit,
            color: rgb.to_vec(),
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn check_finite(&self) -> Result<()> {
        ensure_finite(self.mu.as_slice(), "mu")?;
        ensure_finite(self.log_scale.as_slice(), "log_scale")?;
        ensure_finite(&self.quat.0, "quat")?;
        ensure_finite(&[self.opacity_logit], "opacity_logit")?;
        ensure_finite(&self.color, "color")
    }

    /// Flat parameter row: mu, log_scale, quat, opacity_logit, color.
    pub fn to_row(&self) -> Vec<f64> {
        let mut row = Vec::with_capacity(GEOMETRY_DIM + self.color.len());
        row.extend_from_slice(self.mu.as_slice());
        row.extend_from_slice(self.log_scale.as_slice());
        row.extend_from_slice(&self.quat.0);
        row.push(self.opacity_logit);
        row.extend_from_slice(&self.color);
        row
    }

    pub fn from_row(row: &[f64]) -> Result<Self> {
        if row.len() < GEOMETRY_DIM + 3 {
            return Err(Error::Shape(format!(
                "primitive row has {} values, need at least {}",
                row.len(),
                GEOMETRY_DIM + 3
            )));
        }
        Ok(Self {
            mu: Vector3::new(row[0], row[1], row[2]),
            log_scale: Vector3::new(row[3], row[4], row[5]),
            quat: Quat([row[6], row[7], row[8], row[9]]),
            opacity_logit: row[10],
            color: row[GEOMETRY_DIM..].to_vec(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformationDelta {
    pub d_mu: Vector3<f64>,
    pub d_quat: Quat,
    pub d_log_scale: Vector3<f64>,
}

impl DeformationDelta {
    pub const IDENTITY: DeformationDelta = DeformationDelta {
        d_mu: Vector3::new(0.0, 0.0, 0.0),
        d_quat: Quat::IDENTITY,
        d_log_scale: Vector3::new(0.0, 0.0, 0.0),
    };

    pub fn translation(d_mu: Vector3<f64>) -> Self {
        Self {
            d_mu,
            ..Self::IDENTITY
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn to_row(&self) -> [f64; DEFORM_DIM] {
        let mut row = [0.0; DEFORM_DIM];
        row[..3].copy_from_slice(self.d_mu.as_slice());
        row[3..7].copy_from_slice(&self.d_quat.0);
        row[7..].copy_from_slice(self.d_log_scale.as_slice());
        row
    }

    pub fn from_row(row: &[f64]) -> Result<Self> {
        if row.len() != DEFORM_DIM {
            return Err(Error::Shape(format!(
                "deformation row has {} values, expected {DEFORM_DIM}",
                row.len()
            )));
        }
        Ok(Self {
            d_mu: Vector3::new(row[0], row[1], row[2]),
            d_quat: Quat([row[3], row[4], row[5], row[6]]),
            d_log_scale: Vector3::new(row[7], row[8], row[9]),
        })
    }
}

/// Canonical primitives plus per-timestep deformation rows.
///
/// A static field has a single timestamp `[0]` and no tracks; a dynamic
/// field has one track row per timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianField {
    pub canonical: Vec<GaussianPrimitive>,
    pub tracks: Vec<Vec<DeformationDelta>>,
    pub timestamps: Vec<f64>,
    pub sh_degree: usize,
}

impl GaussianField {
    pub fn new_static(canonical: Vec<GaussianPrimitive>) -> Result<Self> {
        let sh_degree = infer_sh_degree(&canonical)?;
        let field = Self {
            canonical,
            tracks: Vec::new(),
            timestamps: vec![0.0],
            sh_degree,
        };
        field.validate()?;
        Ok(field)
    }

    pub fn new_dynamic(
        canonical: Vec<GaussianPrimitive>,
        tracks: Vec<Vec<DeformationDelta>>,
        timestamps: Vec<f64>,
    ) -> Result<Self> {
        let sh_degree = infer_sh_degree(&canonical)?;
        let field = Self {
            canonical,
            tracks,
            timestamps,
            sh_degree,
        };
        field.validate()?;
        Ok(field)
    }

    /// Dynamic field whose tracks are all identity.
    pub fn with_identity_tracks(canonical: Vec<GaussianPrimitive>, timestamps: Vec<f64>) -> Result<Self> {
        let m = canonical.len();
        let tracks = vec![vec![DeformationDelta::IDENTITY; m]; timestamps.len()];
        Self::new_dynamic(canonical, tracks, timestamps)
    }

    pub fn len(&self) -> usize {
        self.canonical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canonical.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_static(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn color_dim(&self) -> usize {
        sh_coeff_count(self.sh_degree)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > 1 {
            return Err(Error::Config(format!(
                "spherical-harmonic degree {} unsupported (max 1)",
                self.sh_degree
            )));
        }
        let c = self.color_dim();
        for (i, p) in self.canonical.iter().enumerate() {
            p.check_finite()?;
            if p.color.len() != c {
                return Err(Error::Shape(format!(
                    "primitive {i} has {} color values, expected {c}",
                    p.color.len()
                )));
            }
            if !p.quat.is_unit() {
                return Err(Error::RejectedInput(format!("primitive {i} quaternion is not unit")));
            }
        }
        if self.timestamps.is_empty() {
            return Err(Error::Shape("field has no timestamps".into()));
        }
        if self.timestamps[0] != 0.0 {
            return Err(Error::RejectedInput("first timestamp must be 0".into()));
        }
        if self.timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::RejectedInput("timestamps must be strictly increasing".into()));
        }
        if self.timestamps.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::RejectedInput("timestamps must lie in [0,1]".into()));
        }
        let t = self.timestamps.len();
        match (t, self.tracks.len()) {
            (1, 0) => {}
            (t, n) if t > 1 && n == t => {}
            (t, n) => {
                return Err(Error::Shape(format!(
                    "{t} timestamps but {n} track rows (static fields have one timestamp and no tracks)"
                )))
            }
        }
        let m = self.canonical.len();
        for (ti, row) in self.tracks.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Shape(format!(
                    "track row {ti} has {} deltas, expected {m}",
                    row.len()
                )));
            }
            for d in row {
                ensure_finite(d.d_mu.as_slice(), "d_mu")?;
                ensure_finite(&d.d_quat.0, "d_quat")?;
                ensure_finite(d.d_log_scale.as_slice(), "d_log_scale")?;
                if !d.d_quat.is_unit() {
                    return Err(Error::RejectedInput(format!(
                        "track row {ti} holds a non-unit rotation delta"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Index of the timestamp closest to `t`.
    pub fn nearest_frame(&self, t: f64) -> usize {
        let mut best = 0;
        for (i, ts) in self.timestamps.iter().enumerate() {
            if (ts - t).abs() < (self.timestamps[best] - t).abs() {
                best = i;
            }
        }
        best
    }
}

pub fn sh_coeff_count(degree: usize) -> usize {
    3 * (degree + 1) * (degree + 1)
}

fn infer_sh_degree(canonical: &[GaussianPrimitive]) -> Result<usize> {
    match canonical.first().map(|p| p.color.len()) {
        None | Some(3) => Ok(0),
        Some(12) => Ok(1),
        Some(n) => Err(Error::Shape(format!(
            "{n} color coefficients match no supported SH degree"
        ))),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn covariance(p: &GaussianPrimitive) -> Result<Matrix3<f64>> {
    p.check_finite()?;
    Ok(covariance_unchecked(&p.quat, &p.log_scale))
}

pub(crate) fn covariance_unchecked(q: &Quat, log_scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = q.to_rotation();
    let d = Matrix3::from_diagonal(&log_scale.map(|s| (2.0 * s).exp()));
    let s = r * d * r.transpose();
    // Exact symmetry.
    (s + s.transpose()) * 0.5
}

/// `exp(−½ (x−μ)ᵀ Σ⁻¹ (x−μ))`.
pub fn kernel_weight(p: &GaussianPrimitive, x: &Vector3<f64>) -> Result<f64> {
    p.check_finite()?;
    ensure_finite(x.as_slice(), "query point")?;
    let r = p.quat.to_rotation();
    // Σ⁻¹ = R diag(exp(−2s)) Rᵀ, so the quadratic form is a sum over the
    // local axes.
    let local = r.transpose() * (x - p.mu);
    let q: f64 = (0..3)
        .map(|i| local[i] * local[i] * (-2.0 * p.log_scale[i]).exp())
        .sum();
    Ok((-0.5 * q).exp())
}

/// Primitives at timestep `t_index`:
/// `μ' = μ + Δμ`, `q' = q ⊗ Δq`, `log s' = log s + Δlog s`.
pub fn deform(field: &GaussianField, t_index: usize) -> Result<Vec<GaussianPrimitive>> {
    if field.tracks.is_empty() {
        if t_index >= field.timestamps.len().max(1) {
            return Err(Error::Range(format!(
                "timestep {t_index} on a static field"
            )));
        }
        return Ok(field.canonical.clone());
    }
    let row = field.tracks.get(t_index).ok_or_else(|| {
        Error::Range(format!(
            "timestep {t_index} outside 0..{}",
            field.tracks.len()
        ))
    })?;
    field
        .canonical
        .iter()
        .zip(row)
        .map(|(p, d)| apply_delta(p, d))
        .collect()
}

pub fn apply_delta(p: &GaussianPrimitive, d: &DeformationDelta) -> Result<GaussianPrimitive> {
    let quat = if d.d_quat == Quat::IDENTITY {
        p.quat
    } else {
        quat_mul(&p.quat, &d.d_quat)?
    };
    Ok(GaussianPrimitive {
        mu: p.mu + d.d_mu,
        log_scale: p.log_scale + d.d_log_scale,
        quat,
        opacity_logit: p.opacity_logit,
        color: p.color.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit_quat(rng: &mut impl Rng) -> Quat {
        loop {
            let q = Quat(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            if q.norm() > 0.1 {
                return q.normalized().unwrap();
            }
        }
    }

    /// Textbook rotation matrix built column by column from the rotated basis
    /// vectors `q v q*`.
    fn rotation_by_conjugation(q: &Quat) -> Matrix3<f64> {
        let mut r = Matrix3::zeros();
        for j in 0..3 {
            let mut e = [0.0; 4];
            e[j + 1] = 1.0;
            let v = q.hamilton(&Quat(e)).hamilton(&q.conjugate());
            for i in 0..3 {
                r[(i, j)] = v.0[i + 1];
            }
        }
        r
    }

    fn prim(q: Quat, log_scale: Vector3<f64>) -> GaussianPrimitive {
        GaussianPrimitive {
            mu: Vector3::zeros(),
            log_scale,
            quat: q,
            opacity_logit: 0.0,
            color: vec![0.5; 3],
        }
    }

    #[test]
    fn covariance_identity_and_axis_aligned() {
        let s = covariance(&prim(Quat::IDENTITY, Vector3::zeros())).unwrap();
        assert_eq!(s, Matrix3::identity());
        let s = covariance(&prim(Quat::IDENTITY, Vector3::new(2f64.ln(), 0.0, 0.0))).unwrap();
        assert!((s - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn covariance_matches_explicit_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let q = random_unit_quat(&mut rng);
            let ls: Vector3<f64> = Vector3::from_fn(|_, _| rng.random_range(-2.0..1.0));
            let r = rotation_by_conjugation(&q);
            let mut expected = Matrix3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        expected[(i, j)] += r[(i, k)] * (2.0 * ls[k]).exp() * r[(j, k)];
                    }
                }
            }
            let s = covariance(&prim(q, ls)).unwrap();
            assert!((s - expected).abs().max() < 1e-10 * expected.abs().max());
            assert!((s - s.transpose()).abs().max() < 1e-12);
            assert!(s.cholesky().is_some());
        }
    }

    #[test]
    fn covariance_rejects_non_finite() {
        let p = prim(Quat::IDENTITY, Vector3::new(f64::NAN, 0.0, 0.0));
        assert!(matches!(covariance(&p), Err(Error::RejectedInput(_))));
    }

    #[test]
    fn kernel_weight_examples() {
        let p = GaussianPrimitive::isotropic(Vector3::new(1.0, 2.0, 3.0), 1.0, 0.0, [0.0; 3]);
        assert_eq!(kernel_weight(&p, &p.mu).unwrap(), 1.0);
        let x = p.mu + Vector3::new(0.0, 1.0, 0.0);
        assert!((kernel_weight(&p, &x).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn kernel_weight_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut p = prim(
                random_unit_quat(&mut rng),
                Vector3::from_fn(|_, _| rng.random_range(-1.5..0.5)),
            );
            p.mu = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let x = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let sigma = covariance(&p).unwrap();
            let d = x - p.mu;
            let solved = sigma.lu().solve(&d).unwrap();
            let expected = (-0.5 * d.dot(&solved)).exp();
            let got = kernel_weight(&p, &x).unwrap();
            assert!((got - expected).abs() < 1e-10 * expected.max(1e-300) + 1e-14);
            assert!(got > 0.0 && got <= 1.0);
        }
    }

    #[test]
    fn quat_mul_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_unit_quat(&mut rng);
        let p = quat_mul(&a, &Quat::IDENTITY).unwrap();
        assert!((p.as_vector() - a.as_vector()).norm() < 1e-15);

        let z90 = Quat::from_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2);
        let z180 = quat_mul(&z90, &z90).unwrap();
        assert!((z180.as_vector() - Vector4::new(0.0, 0.0, 0.0, 1.0)).norm() < 1e-15);

        assert!(quat_mul(&Quat([0.0; 4]), &a).is_err());
    }

    #[test]
    fn quat_mul_composes_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = random_unit_quat(&mut rng);
            let b = random_unit_quat(&mut rng);
            let ab = quat_mul(&a, &b).unwrap();
            let expected = rotation_by_conjugation(&a) * rotation_by_conjugation(&b);
            assert!((ab.to_rotation() - expected).abs().max() < 1e-12);
        }
    }

    #[test]
    fn quat_mul_keeps_unit_norm_over_long_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut q = Quat::IDENTITY;
        for _ in 0..10_000 {
            q = quat_mul(&q, &random_unit_quat(&mut rng)).unwrap();
            assert!((q.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let q = random_unit_quat(&mut rng);
            let back = Quat::from_rotation(&q.to_rotation());
            // q and −q are the same rotation.
            let err = (back.as_vector() - q.as_vector())
                .norm()
                .min((back.as_vector() + q.as_vector()).norm());
            assert!(err < 1e-12);
        }
    }

    fn random_field(rng: &mut ChaCha8Rng, m: usize, t: usize) -> GaussianField {
        let canonical: Vec<_> = (0..m)
            .map(|_| GaussianPrimitive {
                mu: Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                log_scale: Vector3::from_fn(|_, _| rng.random_range(-2.0..0.0)),
                quat: random_unit_quat(rng),
                opacity_logit: rng.random_range(-2.0..2.0),
                color: (0..3).map(|_| rng.random()).collect(),
            })
            .collect();
        let timestamps = (0..t).map(|i| i as f64 / (t - 1) as f64).collect();
        GaussianField::with_identity_tracks(canonical, timestamps).unwrap()
    }

    #[test]
    fn identity_deform_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let field = random_field(&mut rng, 20, 3);
        for t in 0..3 {
            assert_eq!(deform(&field, t).unwrap(), field.canonical);
        }
        let stat = GaussianField::new_static(field.canonical.clone()).unwrap();
        assert_eq!(deform(&stat, 0).unwrap(), stat.canonical);
        assert!(matches!(deform(&stat, 1), Err(Error::Range(_))));
        assert!(matches!(deform(&field, 3), Err(Error::Range(_))));
    }

    #[test]
    fn deform_translates_and_rotates_relative_to_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut field = random_field(&mut rng, 4, 3);
        field.canonical[0].mu = Vector3::zeros();
        field.tracks[1][0].d_mu = Vector3::new(1.0, 0.0, 0.0);
        let dq = random_unit_quat(&mut rng);
        field.tracks[2][1].d_quat = dq;
        field.tracks[2][1].d_log_scale = Vector3::new(0.5, 0.0, -0.5);

        let f1 = deform(&field, 1).unwrap();
        assert_eq!(f1[0].mu, Vector3::new(1.0, 0.0, 0.0));
        // Row 2 ignores row 1 entirely.
        let f2 = deform(&field, 2).unwrap();
        assert_eq!(f2[0].mu, Vector3::zeros());
        let expected = rotation_by_conjugation(&field.canonical[1].quat) * rotation_by_conjugation(&dq);
        assert!((f2[1].quat.to_rotation() - expected).abs().max() < 1e-12);
        assert_eq!(
            f2[1].log_scale,
            field.canonical[1].log_scale + Vector3::new(0.5, 0.0, -0.5)
        );
        assert_eq!(f2[1].opacity_logit, field.canonical[1].opacity_logit);
    }

    #[test]
    fn field_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut field = random_field(&mut rng, 3, 2);
        field.tracks[1].pop();
        assert!(matches!(field.validate(), Err(Error::Shape(_))));
        let mut field = random_field(&mut rng, 3, 3);
        field.timestamps = vec![0.0, 0.5, 0.5];
        assert!(field.validate().is_err());
        let mut field = random_field(&mut rng, 3, 2);
        field.timestamps[0] = 0.1;
        assert!(field.validate().is_err());
    }

    #[test]
    fn rotation_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            // Deliberately non-unit to exercise the normalization term.
            let q = Quat(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let g = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let analytic = rotation_vjp(&q, &g);
            for i in 0..4 {
                let h = 1e-6;
                let mut qp = q;
                qp.0[i] += h;
                let mut qm = q;
                qm.0[i] -= h;
                let fd = (g.component_mul(&qp.to_rotation()).sum()
                    - g.component_mul(&qm.to_rotation()).sum())
                    / (2.0 * h);
                assert!((fd - analytic[i]).abs() < 1e-7, "{i}: {fd} vs {}", analytic[i]);
            }
        }
    }
}
