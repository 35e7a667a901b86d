//! Flow matching on a linear probability path.
//!
//! Data sits at `t = 0` and standard-normal noise at `t = 1`, with
//! `z_t = (1 − t)·z0 + t·z1`. A model `v(z_t, t, cond)` regresses the
//! constant path velocity `z1 − z0`; sampling integrates from noise back to
//! data with `z ← z − v̂/N`. Guidance follows the cosine schedule
//! `γ(k) = 1 + γ_max·(1 − cos(π((N − k)/N)⁵))/2` over denoising steps
//! `k = 0..N`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::nn::{squash_backward_in_place, squash_in_place, Adam, Grads, Linear, ParamStore};

/// Number of sinusoidal time frequencies; each contributes a sine and a cosine.
pub const TIME_FREQUENCIES: usize = 8;
pub const HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
    pub t: f64,
    pub zt: Vec<f64>,
    pub cond: Option<Vec<f64>>,
}

impl FlowSample {
    pub fn new(z0: Vec<f64>, z1: Vec<f64>, t: f64) -> Result<Self> {
        if z0.len() != z1.len() {
            return Err(Error::Shape(format!("z0 has {} dims, z1 has {}", z0.len(), z1.len())));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::RejectedInput(format!("t = {t} outside [0,1]")));
        }
        ensure_finite(&z0, "z0")?;
        ensure_finite(&z1, "z1")?;
        let zt = z0.iter().zip(&z1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        Ok(Self {
            z0,
            z1,
            t,
            zt,
            cond: None,
        })
    }

    pub fn with_cond(mut self, cond: Vec<f64>) -> Self {
        self.cond = Some(cond);
        self
    }

    pub fn target(&self) -> Vec<f64> {
        self.z1.iter().zip(&self.z0).map(|(a, b)| a - b).collect()
    }
}

/// A time-dependent vector field evaluated on a batch (one row per point).
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, z: &DMatrix<f64>, t: &[f64], cond: Option<&[f64]>) -> DMatrix<f64>;
}

pub fn time_features(t: f64) -> [f64; 2 * TIME_FREQUENCIES] {
    let mut f = [0.0; 2 * TIME_FREQUENCIES];
    for i in 0..TIME_FREQUENCIES {
        let w = PI * (i + 1) as f64;
        f[2 * i] = (w * t).sin();
        f[2 * i + 1] = (w * t).cos();
    }
    f
}

/// Two smooth tanh-like hidden layers over `[z, time features, cond]`.
#[derive(Clone, Debug)]
pub struct MlpField {
    pub store: ParamStore,
    pub dim: usize,
    pub cond_dim: usize,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

/// Activations and their gradients for one batch size, reused across
/// training steps.
struct Workspace {
    h1: DMatrix<f64>,
    h2: DMatrix<f64>,
    out: DMatrix<f64>,
    d_h1: DMatrix<f64>,
    d_h2: DMatrix<f64>,
}

impl Workspace {
    fn new(model: &MlpField, rows: usize) -> Self {
        let hidden = model.l2.output;
        Self {
            h1: DMatrix::zeros(rows, hidden),
            h2: DMatrix::zeros(rows, hidden),
            out: DMatrix::zeros(rows, model.dim),
            d_h1: DMatrix::zeros(rows, hidden),
            d_h2: DMatrix::zeros(rows, hidden),
        }
    }
}

impl MlpField {
    pub fn new(dim: usize, cond_dim: usize, seed: u64) -> Self {
        Self::with_hidden(dim, cond_dim, HIDDEN, seed)
    }

    pub fn with_hidden(dim: usize, cond_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input = dim + 2 * TIME_FREQUENCIES + cond_dim;
        let l1 = Linear::new(&mut store, "fm.l1", input, hidden, 1.0, &mut rng);
        let l2 = Linear::new(&mut store, "fm.l2", hidden, hidden, 1.0, &mut rng);
        let l3 = Linear::new(&mut store, "fm.l3", hidden, dim, 1.0, &mut rng);
        Self {
            store,
            dim,
            cond_dim,
            l1,
            l2,
            l3,
        }
    }

    fn inputs(&self, z: &DMatrix<f64>, t: &[f64], cond: &[Option<&[f64]>]) -> DMatrix<f64> {
        let width = self.dim + 2 * TIME_FREQUENCIES + self.cond_dim;
        let mut input = DMatrix::zeros(z.nrows(), width);
        for r in 0..z.nrows() {
            for c in 0..self.dim {
                input[(r, c)] = z[(r, c)];
            }
            for (k, f) in time_features(t[r]).into_iter().enumerate() {
                input[(r, self.dim + k)] = f;
            }
            if let Some(v) = cond[r] {
                for (k, x) in v.iter().enumerate() {
                    input[(r, self.dim + 2 * TIME_FREQUENCIES + k)] = *x;
                }
            }
        }
        input
    }

    /// Forward pass leaving every activation in `ws`; the output is `ws.out`.
    fn forward(&self, input: &DMatrix<f64>, ws: &mut Workspace) {
        self.l1.forward_into(&self.store, input, &mut ws.h1);
        squash_in_place(&mut ws.h1);
        self.l2.forward_into(&self.store, &ws.h1, &mut ws.h2);
        squash_in_place(&mut ws.h2);
        self.l3.forward_into(&self.store, &ws.h2, &mut ws.out);
    }

    /// Parameter gradient given `∂L/∂out` stored in `ws.out`.
    fn backward(&self, input: &DMatrix<f64>, ws: &mut Workspace) -> Grads {
        let mut grads = self.store.zero_grads();
        self.l3.backward_into(&self.store, &mut grads, &ws.h2, &ws.out, &mut ws.d_h2);
        squash_backward_in_place(&ws.h2, &mut ws.d_h2);
        self.l2.backward_into(&self.store, &mut grads, &ws.h1, &ws.d_h2, &mut ws.d_h1);
        squash_backward_in_place(&ws.h1, &mut ws.d_h1);
        self.l1.backward_params(&self.store, &mut grads, input, &ws.d_h1);
        grads
    }

    fn check_cond(&self, cond: Option<&[f64]>) -> Result<()> {
        match cond {
            Some(c) if c.len() != self.cond_dim => Err(Error::Shape(format!(
                "condition has {} values, model expects {}",
                c.len(),
                self.cond_dim
            ))),
            _ => Ok(()),
        }
    }
}

impl VectorField for MlpField {
    fn dim(&self) -> usize {
        self.dim
    }

    /// A missing condition is the null (all-zero) condition.
    fn eval(&self, z: &DMatrix<f64>, t: &[f64], cond: Option<&[f64]>) -> DMatrix<f64> {
        let conds = vec![cond.filter(|c| c.len() == self.cond_dim); z.nrows()];
        let mut ws = Workspace::new(self, z.nrows());
        self.forward(&self.inputs(z, t, &conds), &mut ws);
        ws.out
    }
}

fn check_batch(dim: usize, batch: &[FlowSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty flow-matching batch".into()));
    }
    for s in batch {
        if s.z0.len() != dim || s.z1.len() != dim || s.zt.len() != dim {
            return Err(Error::Shape(format!("sample dimension differs from model dimension {dim}")));
        }
    }
    Ok(())
}

fn batch_matrix(batch: &[FlowSample], dim: usize) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
    let zt = DMatrix::from_fn(batch.len(), dim, |r, c| batch[r].zt[c]);
    let target = DMatrix::from_fn(batch.len(), dim, |r, c| batch[r].z1[c] - batch[r].z0[c]);
    let t = batch.iter().map(|s| s.t).collect();
    (zt, target, t)
}

/// `mean_b w(t_b)·‖v(z_t, t) − (z1 − z0)‖²` for any vector field.
pub fn fm_loss_value(model: &dyn VectorField, batch: &[FlowSample], weight: &dyn Fn(f64) -> f64) -> Result<f64> {
    check_batch(model.dim(), batch)?;
    let (zt, target, t) = batch_matrix(batch, model.dim());
    let mut total = 0.0;
    for (r, s) in batch.iter().enumerate() {
        let v = model.eval(&zt.rows(r, 1).into_owned(), &t[r..r + 1], s.cond.as_deref());
        total += weight(s.t) * (v.row(0) - target.row(r)).norm_squared();
    }
    Ok(total / batch.len() as f64)
}

/// A batch laid out as network inputs, regression targets and weights.
pub struct PreparedBatch {
    input: DMatrix<f64>,
    target: DMatrix<f64>,
    weights: Vec<f64>,
}

impl PreparedBatch {
    pub fn new(model: &MlpField, batch: &[FlowSample], weight: &dyn Fn(f64) -> f64) -> Result<Self> {
        check_batch(model.dim, batch)?;
        for s in batch {
            model.check_cond(s.cond.as_deref())?;
        }
        let (zt, target, t) = batch_matrix(batch, model.dim);
        let conds: Vec<Option<&[f64]>> = batch.iter().map(|s| s.cond.as_deref()).collect();
        Ok(Self {
            input: model.inputs(&zt, &t, &conds),
            target,
            weights: batch.iter().map(|s| weight(s.t)).collect(),
        })
    }
}

/// Flow-matching loss of the perceptron and its parameter gradient.
pub fn fm_loss(model: &MlpField, batch: &[FlowSample], weight: &dyn Fn(f64) -> f64) -> Result<(f64, Vec<f64>)> {
    Ok(fm_loss_prepared(model, &PreparedBatch::new(model, batch, weight)?))
}

pub fn fm_loss_prepared(model: &MlpField, batch: &PreparedBatch) -> (f64, Vec<f64>) {
    fm_loss_in(model, batch, &mut Workspace::new(model, batch.weights.len()))
}

fn fm_loss_in(model: &MlpField, batch: &PreparedBatch, ws: &mut Workspace) -> (f64, Vec<f64>) {
    model.forward(&batch.input, ws);
    let n = batch.weights.len() as f64;
    let mut total = 0.0;
    // Turn the output into ∂L/∂out in place.
    for (mut col, target) in ws.out.column_iter_mut().zip(batch.target.column_iter()) {
        for ((v, y), &w) in col.iter_mut().zip(target.iter()).zip(&batch.weights) {
            let e = *v - y;
            total += w * e * e;
            *v = 2.0 * w / n * e;
        }
    }
    let grads = model.backward(&batch.input, ws);
    (total / n, grads.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSchedule {
    pub gamma_max: f64,
    pub steps: usize,
}

impl Default for GuidanceSchedule {
    fn default() -> Self {
        Self {
            gamma_max: 7.5,
            steps: 30,
        }
    }
}

pub fn guidance_gamma(schedule: &GuidanceSchedule, t_step: usize) -> Result<f64> {
    let n = schedule.steps;
    if n == 0 {
        return Err(Error::Config("guidance schedule needs at least one step".into()));
    }
    if t_step > n {
        return Err(Error::Range(format!("guidance step {t_step} outside 0..={n}")));
    }
    let x = ((n - t_step) as f64 / n as f64).powi(5);
    Ok(1.0 + schedule.gamma_max * (1.0 - (PI * x).cos()) / 2.0)
}

/// Integrates `n_samples` standard-normal draws from `t = 1` to `t = 0` with
/// `schedule.steps` Euler steps. With a condition, the guided field
/// `v_u + γ(k)(v_c − v_u)` is used, where `v_u` is the unconditional field.
pub fn sample(
    model: &dyn VectorField,
    schedule: &GuidanceSchedule,
    cond: Option<&[f64]>,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = model.dim();
    let z1 = DMatrix::from_fn(n_samples, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    integrate(model, schedule, cond, z1)
}

/// The Euler integration of [`sample`] from explicit starting points.
pub fn integrate(
    model: &dyn VectorField,
    schedule: &GuidanceSchedule,
    cond: Option<&[f64]>,
    start: DMatrix<f64>,
) -> Result<Vec<Vec<f64>>> {
    let n = schedule.steps;
    if n == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    if start.ncols() != model.dim() {
        return Err(Error::Shape("start points do not match the model dimension".into()));
    }
    let mut z = start;
    let dt = 1.0 / n as f64;
    for k in 0..n {
        let t = vec![1.0 - k as f64 * dt; z.nrows()];
        let v = match cond {
            Some(c) => {
                let gamma = guidance_gamma(schedule, k)?;
                let vc = model.eval(&z, &t, Some(c));
                let vu = model.eval(&z, &t, None);
                &vu + (vc - &vu) * gamma
            }
            None => model.eval(&z, &t, None),
        };
        z -= v * dt;
    }
    Ok(z.row_iter().map(|r| r.iter().copied().collect()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Size of the fixed training set of `(z0, z1, t)` triples, used as one
    /// full batch per step.
    pub dataset_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            dataset_size: 12288,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Draws a fixed training set: data points from `draw_data`, noise from a
/// standard normal and times stratified over `[0, 1]`.
pub fn make_dataset(
    dim: usize,
    size: usize,
    seed: u64,
    mut draw_data: impl FnMut(&mut ChaCha8Rng) -> Vec<f64>,
) -> Result<Vec<FlowSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|i| {
            let z0 = draw_data(&mut rng);
            let z1: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let t = (i as f64 + rng.random::<f64>()) / size as f64;
            FlowSample::new(z0, z1, t)
        })
        .collect()
}

/// Full-batch Adam on a fixed dataset with a cosine learning-rate decay.
/// Returns the loss before every step.
pub fn train(model: &mut MlpField, data: &[FlowSample], config: &TrainConfig) -> Result<Vec<f64>> {
    let batch = PreparedBatch::new(model, data, &|_| 1.0)?;
    let mut opt = Adam::new(model.store.len());
    let mut ws = Workspace::new(model, data.len());
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (loss, grads) = fm_loss_in(model, &batch, &mut ws);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: step,
                reason: "non-finite flow-matching loss".into(),
            });
        }
        curve.push(loss);
        let lr = config.lr * 0.5 * (1.0 + (PI * step as f64 / config.steps as f64).cos());
        opt.step(&mut model.store.values, &grads, |_| lr);
    }
    Ok(curve)
}

/// Trailing moving average with a full window.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut sum: f64 = values[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as f64);
    }
    out
}

/// Sample mean and (population) covariance.
pub fn mean_and_cov(samples: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let dim = samples.first().map_or(0, |s| s.len());
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let d = DVector::from_column_slice(s) - &mean;
        cov += &d * d.transpose();
    }
    (mean, cov / n)
}

/// A 2-D Gaussian `mean + L·n` with lower-triangular factor `L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianTarget {
    pub mean: [f64; 2],
    pub chol: [[f64; 2]; 2],
}

impl Default for GaussianTarget {
    /// An anisotropic, correlated target.
    fn default() -> Self {
        Self {
            mean: [1.0, -0.5],
            chol: [[1.0, 0.0], [0.6, 0.5]],
        }
    }
}

impl GaussianTarget {
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        let l = &self.chol;
        vec![self.mean[0] + l[0][0] * a, self.mean[1] + l[1][0] * a + l[1][1] * b]
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let l = DMatrix::from_row_slice(2, 2, &[self.chol[0][0], 0.0, self.chol[1][0], self.chol[1][1]]);
        &l * l.transpose()
    }
}

/// Outcome of training a field on a [`GaussianTarget`] and sampling it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub target: GaussianTarget,
    pub config: TrainConfig,
    pub loss_curve: Vec<f64>,
    pub sample_count: usize,
    pub sample_mean: Vec<f64>,
    /// Row-major 2×2 sample covariance.
    pub sample_cov: Vec<f64>,
    pub mean_error: f64,
    /// Frobenius norm of the covariance error.
    pub cov_error: f64,
}

/// Sampler settings for the toy: plain Euler without guidance.
pub const TOY_SAMPLER: GuidanceSchedule = GuidanceSchedule {
    gamma_max: 0.0,
    steps: 100,
};

pub fn toy_demo(target: &GaussianTarget, config: &TrainConfig, n_samples: usize) -> Result<ToyReport> {
    let data = make_dataset(2, config.dataset_size, config.seed.wrapping_add(1), |r| target.draw(r))?;
    let mut model = MlpField::new(2, 0, config.seed);
    let loss_curve = train(&mut model, &data, config)?;
    let samples = sample(&model, &TOY_SAMPLER, None, n_samples, config.seed.wrapping_add(2))?;
    let (mean, cov) = mean_and_cov(&samples);
    let mean_error = (&mean - DVector::from_column_slice(&target.mean)).norm();
    let cov_error = (&cov - target.covariance()).norm();
    Ok(ToyReport {
        target: *target,
        config: config.clone(),
        loss_curve,
        sample_count: n_samples,
        sample_mean: mean.iter().copied().collect(),
        sample_cov: cov.transpose().iter().copied().collect(),
        mean_error,
        cov_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The exact field for a point mass at `c`: `(z − c)/t`.
    struct PointMass(Vec<f64>);

    impl VectorField for PointMass {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn eval(&self, z: &DMatrix<f64>, t: &[f64], _: Option<&[f64]>) -> DMatrix<f64> {
            DMatrix::from_fn(z.nrows(), z.ncols(), |r, c| (z[(r, c)] - self.0[c]) / t[r])
        }
    }

    struct Zero(usize);

    impl VectorField for Zero {
        fn dim(&self) -> usize {
            self.0
        }
        fn eval(&self, z: &DMatrix<f64>, _: &[f64], _: Option<&[f64]>) -> DMatrix<f64> {
            DMatrix::zeros(z.nrows(), self.0)
        }
    }

    #[test]
    fn interpolation_and_loss_examples() {
        let s = FlowSample::new(vec![1.0, 0.0], vec![0.0, 0.0], 0.5).unwrap();
        assert_eq!(s.zt, vec![0.5, 0.0]);
        assert_eq!(fm_loss_value(&Zero(2), std::slice::from_ref(&s), &|_| 1.0).unwrap(), 1.0);
        let oracle = PointMass(vec![1.0, 0.0]);
        let on_path = FlowSample::new(vec![1.0, 0.0], vec![0.3, -2.0], 0.25).unwrap();
        assert!(fm_loss_value(&oracle, &[on_path], &|_| 1.0).unwrap() < 1e-24);
        assert!(matches!(FlowSample::new(vec![1.0], vec![0.0, 0.0], 0.5), Err(Error::Shape(_))));
        assert!(matches!(fm_loss_value(&Zero(2), &[], &|_| 1.0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn point_mass_sampler_lands_on_target() {
        let c = vec![0.7, -1.2];
        let start = DMatrix::from_row_slice(1, 2, &[2.0, 3.0]);
        let out = integrate(&PointMass(c.clone()), &GuidanceSchedule::default(), None, start).unwrap();
        assert!((out[0][0] - c[0]).abs() < 1e-12 && (out[0][1] - c[1]).abs() < 1e-12);
        let bad = GuidanceSchedule {
            gamma_max: 1.0,
            steps: 0,
        };
        assert!(matches!(sample(&Zero(2), &bad, None, 4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn gamma_schedule() {
        let s = GuidanceSchedule::default();
        assert_eq!(guidance_gamma(&s, 0).unwrap(), 8.5);
        assert_eq!(guidance_gamma(&s, 30).unwrap(), 1.0);
        let mid = 1.0 + 7.5 * (1.0 - (PI * 0.5f64.powi(5)).cos()) / 2.0;
        assert!((guidance_gamma(&s, 15).unwrap() - mid).abs() < 1e-15);
        assert!(matches!(guidance_gamma(&s, 31), Err(Error::Range(_))));
        for n in 1..=100 {
            for gmax in [0.0, 0.5, 7.5, 20.0] {
                let s = GuidanceSchedule { gamma_max: gmax, steps: n };
                let g: Vec<f64> = (0..=n).map(|k| guidance_gamma(&s, k).unwrap()).collect();
                assert!(g.windows(2).all(|w| w[1] <= w[0]));
            }
        }
    }

    #[test]
    fn fm_gradient_matches_fd() {
        let mut model = MlpField::new(2, 3, 7);
        let data = make_dataset(2, 16, 1, |r| vec![r.random_range(-1.0..1.0), r.random_range(0.0..2.0)]).unwrap();
        let data: Vec<_> = data
            .into_iter()
            .enumerate()
            .map(|(i, s)| if i % 2 == 0 { s.with_cond(vec![1.0, -0.5, 0.25]) } else { s })
            .collect();
        let weight = |t: f64| 1.0 + t;
        let (_, g) = fm_loss(&model, &data, &weight).unwrap();
        let h = 1e-6;
        for i in (0..model.store.len()).step_by(13) {
            let v = model.store.values[i];
            model.store.values[i] = v + h;
            let a = fm_loss(&model, &data, &weight).unwrap().0;
            model.store.values[i] = v - h;
            let b = fm_loss(&model, &data, &weight).unwrap().0;
            model.store.values[i] = v;
            let fd = (a - b) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-4), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let model = MlpField::new(2, 0, 3);
        let s = GuidanceSchedule::default();
        assert_eq!(sample(&model, &s, None, 8, 5).unwrap(), sample(&model, &s, None, 8, 5).unwrap());
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }
}
