//! Small neural-network toolkit with hand-written backward passes: a flat
//! parameter store, dense layers, layer norm, multi-head self-attention,
//! pre-norm transformer blocks and Adam.
//!
//! Activations are `DMatrix` values with one row per token (or batch item).
//! Weights are stored row-major as `in × out`, so a layer computes
//! `Y = X·W + 1·bᵀ`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, RowDVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All trainable values of a model in one flat vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub values: Vec<f64>,
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Vec<f64>) -> ParamId {
        let entry = ParamEntry {
            name: name.into(),
            offset: self.values.len(),
            shape: shape.to_vec(),
        };
        assert_eq!(init.len(), entry.len(), "initializer size for {}", entry.name);
        self.values.extend(init);
        self.entries.push(entry);
        ParamId(self.entries.len() - 1)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let n = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("finite std");
        self.add(name, shape, (0..n).map(|_| normal.sample(rng)).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.values[e.offset..e.offset + e.len()]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &self.entries[id.0];
        let (a, b) = (e.offset, e.offset + e.len());
        &mut self.values[a..b]
    }

    /// Rank-2 entry as a matrix.
    pub fn matrix(&self, id: ParamId) -> DMatrix<f64> {
        let e = &self.entries[id.0];
        DMatrix::from_row_slice(e.shape[0], e.shape[1], self.slice(id))
    }

    pub fn row(&self, id: ParamId) -> RowDVector<f64> {
        RowDVector::from_row_slice(self.slice(id))
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(vec![0.0; self.values.len()])
    }

    /// Replaces every value; shapes must already agree.
    pub fn load_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "{} parameter values for a store of {}",
                values.len(),
                self.values.len()
            )));
        }
        self.values = values;
        Ok(())
    }
}

/// Gradient buffer laid out like [`ParamStore::values`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<f64>);

impl Grads {
    fn range(store: &ParamStore, id: ParamId) -> std::ops::Range<usize> {
        let e = store.entry(id);
        e.offset..e.offset + e.len()
    }

    /// Adds a matrix gradient (row-major) for a rank-2 entry.
    pub fn add_matrix(&mut self, store: &ParamStore, id: ParamId, g: &DMatrix<f64>) {
        let r = Self::range(store, id);
        let cols = g.ncols();
        for (k, v) in self.0[r].iter_mut().enumerate() {
            *v += g[(k / cols, k % cols)];
        }
    }

    pub fn add_slice(&mut self, store: &ParamStore, id: ParamId, g: &[f64]) {
        let r = Self::range(store, id);
        for (v, d) in self.0[r].iter_mut().zip(g) {
            *v += d;
        }
    }

    pub fn slice(&self, store: &ParamStore, id: ParamId) -> &[f64] {
        &self.0[Self::range(store, id)]
    }
}

fn column_sums(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.ncols()).map(|c| m.column(c).sum()).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Weights drawn from `N(0, gain²/in)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let w = if gain == 0.0 {
            store.add_zeros(format!("{name}.w"), &[input, output])
        } else {
            store.add_normal(format!("{name}.w"), &[input, output], gain / (input as f64).sqrt(), rng)
        };
        let b = store.add_zeros(format!("{name}.b"), &[output]);
        Self { w, b, input, output }
    }

    pub fn forward(&self, store: &ParamStore, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(x.nrows(), self.output);
        self.forward_into(store, x, &mut y);
        y
    }

    /// [`Linear::forward`] into a preallocated `rows × output` matrix.
    pub fn forward_into(&self, store: &ParamStore, x: &DMatrix<f64>, y: &mut DMatrix<f64>) {
        assert_eq!(x.ncols(), self.input, "linear layer input width");
        let n = x.nrows();
        assert_eq!((y.nrows(), y.ncols()), (n, self.output), "linear layer output shape");
        for (mut col, &b) in y.column_iter_mut().zip(store.slice(self.b)) {
            col.fill(b);
        }
        // Y (column-major) += X (column-major) · W (row-major).
        gemm(
            [n, self.input, self.output],
            (x.as_slice(), 1, n),
            (store.slice(self.w), self.output, 1),
            1.0,
            (y.as_mut_slice(), 1, n),
        );
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, x: &DMatrix<f64>, dy: &DMatrix<f64>) -> DMatrix<f64> {
        let mut dx = DMatrix::zeros(dy.nrows(), self.input);
        self.backward_into(store, grads, x, dy, &mut dx);
        dx
    }

    /// [`Linear::backward`] writing `∂L/∂x` into a preallocated matrix.
    pub fn backward_into(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        x: &DMatrix<f64>,
        dy: &DMatrix<f64>,
        dx: &mut DMatrix<f64>,
    ) {
        self.backward_params(store, grads, x, dy);
        let n = dy.nrows();
        assert_eq!((dx.nrows(), dx.ncols()), (n, self.input), "linear layer input-gradient shape");
        // dX = dY · Wᵀ, reading the row-major W with swapped strides.
        gemm(
            [n, self.output, self.input],
            (dy.as_slice(), 1, n),
            (store.slice(self.w), 1, self.output),
            0.0,
            (dx.as_mut_slice(), 1, n),
        );
    }

    /// Accumulates parameter gradients only, for layers whose input needs no
    /// gradient.
    pub fn backward_params(&self, store: &ParamStore, grads: &mut Grads, x: &DMatrix<f64>, dy: &DMatrix<f64>) {
        assert_eq!((x.nrows(), x.ncols()), (dy.nrows(), self.input), "linear layer input shape");
        assert_eq!(dy.ncols(), self.output, "linear layer output width");
        let n = x.nrows();
        // dW (row-major) += Xᵀ · dY.
        let r = Grads::range(store, self.w);
        gemm(
            [self.input, n, self.output],
            (x.as_slice(), n, 1),
            (dy.as_slice(), 1, n),
            1.0,
            (&mut grads.0[r], self.output, 1),
        );
        grads.add_slice(store, self.b, &column_sums(dy));
    }
}

/// `C ← A·B + beta·C` for an `m × k` by `k × n` product, each operand given
/// as a slice with its row and column strides.
fn gemm(
    [m, k, n]: [usize; 3],
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    beta: f64,
    (c, rsc, csc): (&mut [f64], usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, n, rsc, csc) < c.len(), "gemm output out of bounds");
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm left operand out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm right operand out of bounds");
    }
    let s = |v: usize| v as isize;
    // SAFETY: every index reachable from the strides lies inside its slice
    // (checked above), and `c` is borrowed mutably, so it aliases neither
    // operand.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            s(rsa),
            s(csa),
            b.as_ptr(),
            s(rsb),
            s(csb),
            beta,
            c.as_mut_ptr(),
            s(rsc),
            s(csc),
        );
    }
}

/// Smooth squashing `x / √(1 + x²)`: tanh-shaped, bounded in (−1, 1), and
/// several times cheaper to evaluate than `tanh`.
pub fn squash_forward(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = x.clone();
    squash_in_place(&mut y);
    y
}

pub fn squash_in_place(x: &mut DMatrix<f64>) {
    x.apply(|v| *v /= (1.0 + *v * *v).sqrt());
}

/// Backward of [`squash_forward`] given its output `y`: the derivative is
/// `(1 − y²)^{3/2}`.
pub fn squash_backward(y: &DMatrix<f64>, dy: &DMatrix<f64>) -> DMatrix<f64> {
    let mut dx = dy.clone();
    squash_backward_in_place(y, &mut dx);
    dx
}

/// [`squash_backward`] overwriting the upstream gradient.
pub fn squash_backward_in_place(y: &DMatrix<f64>, dy: &mut DMatrix<f64>) {
    assert_eq!(y.shape(), dy.shape(), "squash gradient shape");
    for (g, v) in dy.iter_mut().zip(y.iter()) {
        let s = 1.0 - v * v;
        *g *= s * s.sqrt();
    }
}

const GELU_K: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let u = c * (x + GELU_K * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn gelu_forward(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.map(gelu)
}

/// Backward of GELU given its input `x`.
pub fn gelu_backward(x: &DMatrix<f64>, dy: &DMatrix<f64>) -> DMatrix<f64> {
    dy.zip_map(x, |g, v| g * gelu_grad(v))
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub struct LayerNormCache {
    normalized: DMatrix<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), &[dim], vec![1.0; dim]),
            beta: store.add_zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &DMatrix<f64>) -> (DMatrix<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in normalized.row_iter_mut() {
            let mean = row.sum() / d;
            row.add_scalar_mut(-mean);
            let var = row.norm_squared() / d;
            let s = 1.0 / (var + LN_EPS).sqrt();
            row *= s;
            inv_std.push(s);
        }
        let gamma = store.slice(self.gamma);
        let beta = store.slice(self.beta);
        let mut y = normalized.clone();
        for mut row in y.row_iter_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v * gamma[c] + beta[c];
            }
        }
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &LayerNormCache, dy: &DMatrix<f64>) -> DMatrix<f64> {
        let gamma = store.slice(self.gamma);
        let d = dy.ncols();
        let mut g_gamma = vec![0.0; d];
        let mut dx = DMatrix::zeros(dy.nrows(), d);
        for r in 0..dy.nrows() {
            let mut dn = vec![0.0; d];
            for c in 0..d {
                g_gamma[c] += dy[(r, c)] * cache.normalized[(r, c)];
                dn[c] = dy[(r, c)] * gamma[c];
            }
            let mean_dn = dn.iter().sum::<f64>() / d as f64;
            let mean_dn_n = (0..d).map(|c| dn[c] * cache.normalized[(r, c)]).sum::<f64>() / d as f64;
            for c in 0..d {
                dx[(r, c)] = cache.inv_std[r] * (dn[c] - mean_dn - cache.normalized[(r, c)] * mean_dn_n);
            }
        }
        grads.add_slice(store, self.gamma, &g_gamma);
        grads.add_slice(store, self.beta, &column_sums(dy));
        dx
    }
}

/// Row-wise softmax.
pub fn softmax_rows(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = s.clone();
    for mut row in p.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let z = row.sum();
        row /= z;
    }
    p
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    x: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    /// Attention probabilities per head, `L × L`.
    pub probs: Vec<DMatrix<f64>>,
    concat: DMatrix<f64>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("model width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, 1.0, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, 1.0, rng),
            heads,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &DMatrix<f64>) -> (DMatrix<f64>, AttentionCache) {
        let q = self.q.forward(store, x);
        let k = self.k.forward(store, x);
        let v = self.v.forward(store, x);
        let (l, d) = (x.nrows(), x.ncols());
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = DMatrix::zeros(l, d);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.columns(h * dh, dh);
            let kh = k.columns(h * dh, dh);
            let vh = v.columns(h * dh, dh);
            let p = softmax_rows(&((qh * kh.transpose()) * scale));
            concat.columns_mut(h * dh, dh).copy_from(&(&p * vh));
            probs.push(p);
        }
        let y = self.out.forward(store, &concat);
        (
            y,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                concat,
            },
        )
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &AttentionCache, dy: &DMatrix<f64>) -> DMatrix<f64> {
        let d_concat = self.out.backward(store, grads, &cache.concat, dy);
        let (l, d) = (cache.x.nrows(), cache.x.ncols());
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = DMatrix::zeros(l, d);
        let mut dk = DMatrix::zeros(l, d);
        let mut dv = DMatrix::zeros(l, d);
        for h in 0..self.heads {
            let p = &cache.probs[h];
            let d_oh = d_concat.columns(h * dh, dh);
            let vh = cache.v.columns(h * dh, dh);
            let dp = d_oh * vh.transpose();
            dv.columns_mut(h * dh, dh).copy_from(&(p.transpose() * d_oh));
            let mut ds = dp.component_mul(p);
            for r in 0..l {
                let s: f64 = ds.row(r).sum();
                for c in 0..l {
                    ds[(r, c)] -= p[(r, c)] * s;
                }
            }
            ds *= scale;
            dq.columns_mut(h * dh, dh).copy_from(&(&ds * cache.k.columns(h * dh, dh)));
            dk.columns_mut(h * dh, dh).copy_from(&(ds.transpose() * cache.q.columns(h * dh, dh)));
        }
        self.q.backward(store, grads, &cache.x, &dq)
            + self.k.backward(store, grads, &cache.x, &dk)
            + self.v.backward(store, grads, &cache.x, &dv)
    }
}

/// `x + MHA(LN(x))` followed by `x + W₂·GELU(W₁·LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ln2_out: DMatrix<f64>,
    hidden_pre: DMatrix<f64>,
    hidden: DMatrix<f64>,
}

impl BlockCache {
    pub fn attention(&self) -> &AttentionCache {
        &self.attn
    }
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, 4 * dim, 1.0, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 4 * dim, dim, 1.0, rng),
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &DMatrix<f64>) -> (DMatrix<f64>, BlockCache) {
        let (n1, ln1) = self.ln1.forward(store, x);
        let (a, attn) = self.attn.forward(store, &n1);
        let x1 = x + a;
        let (n2, ln2) = self.ln2.forward(store, &x1);
        let hidden_pre = self.ff1.forward(store, &n2);
        let hidden = gelu_forward(&hidden_pre);
        let y = &x1 + self.ff2.forward(store, &hidden);
        (
            y,
            BlockCache {
                ln1,
                attn,
                ln2,
                ln2_out: n2,
                hidden_pre,
                hidden,
            },
        )
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &BlockCache, dy: &DMatrix<f64>) -> DMatrix<f64> {
        let d_hidden = self.ff2.backward(store, grads, &cache.hidden, dy);
        let d_pre = gelu_backward(&cache.hidden_pre, &d_hidden);
        let d_n2 = self.ff1.backward(store, grads, &cache.ln2_out, &d_pre);
        let dx1 = dy + self.ln2.backward(store, grads, &cache.ln2, &d_n2);
        let d_n1 = self.attn.backward(store, grads, &cache.attn, &dx1);
        &dx1 + self.ln1.backward(store, grads, &cache.ln1, &d_n1)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with a per-index learning rate. Indices whose learning
    /// rate is zero are left untouched, moments included.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let rate = lr(i);
            if rate == 0.0 {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Checks `backward` against central differences of `⟨dy, forward⟩` for
    /// every parameter and every input entry.
    pub(crate) fn check_layer(
        store: &ParamStore,
        x: &DMatrix<f64>,
        forward: impl Fn(&ParamStore, &DMatrix<f64>) -> DMatrix<f64>,
        backward: impl Fn(&ParamStore, &mut Grads, &DMatrix<f64>) -> DMatrix<f64>,
        rng: &mut ChaCha8Rng,
        tol: f64,
    ) {
        let y = forward(store, x);
        let dy = random_matrix(rng, y.nrows(), y.ncols());
        let mut grads = store.zero_grads();
        let dx = backward(store, &mut grads, &dy);
        let objective = |s: &ParamStore, xx: &DMatrix<f64>| forward(s, xx).dot(&dy);
        let h = 1e-6;
        for i in 0..store.len() {
            let mut a = store.clone();
            a.values[i] += h;
            let mut b = store.clone();
            b.values[i] -= h;
            let fd = (objective(&a, x) - objective(&b, x)) / (2.0 * h);
            assert!((fd - grads.0[i]).abs() <= tol * fd.abs().max(1e-3), "param {i}: {fd} vs {}", grads.0[i]);
        }
        for i in 0..x.len() {
            let mut a = x.clone();
            a[i] += h;
            let mut b = x.clone();
            b[i] -= h;
            let fd = (objective(store, &a) - objective(store, &b)) / (2.0 * h);
            assert!((fd - dx[i]).abs() <= tol * fd.abs().max(1e-3), "input {i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn linear_and_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 5, 3, 1.0, &mut rng);
        store.slice_mut(lin.b).iter_mut().for_each(|v| *v = 0.3);
        let x = random_matrix(&mut rng, 4, 5);
        check_layer(
            &store,
            &x,
            |s, x| lin.forward(s, x),
            |s, g, dy| lin.backward(s, g, &x, dy),
            &mut rng,
            1e-6,
        );

        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 6);
        for (i, v) in store.values.iter_mut().enumerate() {
            *v += 0.1 * i as f64;
        }
        let x = random_matrix(&mut rng, 3, 6);
        check_layer(
            &store,
            &x,
            |s, x| ln.forward(s, x).0,
            |s, g, dy| {
                let (_, cache) = ln.forward(s, &x);
                ln.backward(s, g, &cache, dy)
            },
            &mut rng,
            1e-5,
        );
    }

    #[test]
    fn linear_matches_dense_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 7, 9, 1.0, &mut rng);
        store.slice_mut(lin.b).iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64);
        let x = random_matrix(&mut rng, 11, 7);
        let dy = random_matrix(&mut rng, 11, 9);
        let (w, b) = (store.matrix(lin.w), store.row(lin.b));

        let y = lin.forward(&store, &x);
        let expect = &x * &w + DMatrix::from_fn(11, 9, |_, c| b[c]);
        assert!((y - expect).abs().max() < 1e-12);

        let mut grads = store.zero_grads();
        let dx = lin.backward(&store, &mut grads, &x, &dy);
        assert!((dx - &dy * w.transpose()).abs().max() < 1e-12);
        let dw = DMatrix::from_row_slice(7, 9, grads.slice(&store, lin.w));
        assert!((dw - x.transpose() * &dy).abs().max() < 1e-12);

        let mut only = store.zero_grads();
        lin.backward_params(&store, &mut only, &x, &dy);
        assert_eq!(only, grads);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let x = random_matrix(&mut rng, 5, 8) * 3.0;
        let (_, cache) = attn.forward(&store, &x);
        for p in &cache.probs {
            for row in p.row_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        assert!(matches!(
            MultiHeadAttention::new(&mut store, "b", 10, 3, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn block_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "blk", 8, 2, &mut rng).unwrap();
        for v in store.values.iter_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
        let x = random_matrix(&mut rng, 4, 8);
        check_layer(
            &store,
            &x,
            |s, x| block.forward(s, x).0,
            |s, g, dy| {
                let (_, cache) = block.forward(s, &x);
                block.backward(s, g, &cache, dy)
            },
            &mut rng,
            1e-4,
        );
    }

    #[test]
    fn zeroed_output_projections_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "blk", 8, 2, &mut rng).unwrap();
        for id in [block.attn.out.w, block.attn.out.b, block.ff2.w, block.ff2.b] {
            store.slice_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random_matrix(&mut rng, 6, 8);
        assert_eq!(block.forward(&store, &x).0, x);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2);
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0), 8.0 * (p[1] + 0.5)];
            opt.step(&mut p, &g, |_| 0.05);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);

        // The first step moves every coordinate by exactly the learning rate.
        let mut p = vec![0.0, 0.0, 5.0];
        let mut opt = Adam::new(3);
        opt.step(&mut p, &[2.0, -0.001, 1.0], |i| if i == 2 { 0.0 } else { 0.1 });
        assert!((p[0] + 0.1).abs() < 1e-6 && (p[1] - 0.1).abs() < 1e-4);
        assert_eq!(p[2], 5.0);
    }
}
