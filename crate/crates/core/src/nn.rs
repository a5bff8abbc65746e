//! Small dense-tensor neural substrate: dense, LSTM, BiLSTM, multi-head
//! self-attention, dropout, Adam, and a finite-difference gradient checker.
//!
//! Every layer has an explicit `forward` that returns a cache and a
//! `backward` that consumes it, accumulates parameter gradients into the
//! [`ParamStore`], and returns the input gradient. All values are `f64`,
//! matrices are row-major.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    Shape { left: Vec<usize>, right: Vec<usize> },
    #[error("d_model {d_model} is not divisible by {heads} heads")]
    Heads { d_model: usize, heads: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NnError::Shape { left: shape.to_vec(), right: vec![data.len()] });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all dimensions after the first.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `out[n×m] (+)= a[n×k] · b[k×m]`.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (y, &w) in o.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *y += x * w;
            }
        }
    }
}

/// `out[k×m] += aᵀ · b` for `a[n×k]`, `b[n×m]`.
pub fn matmul_at_b_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let br = &b[i * m..(i + 1) * m];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (y, &w) in out[p * m..(p + 1) * m].iter_mut().zip(br) {
                *y += x * w;
            }
        }
    }
}

/// `out[n×k] += a · bᵀ` for `a[n×m]`, `b[k×m]`.
pub fn matmul_a_bt_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let ar = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let s: f64 = ar.iter().zip(&b[p * m..(p + 1) * m]).map(|(x, y)| x * y).sum();
            out[i * k + p] += s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// First-moment estimate.
    pub m: Tensor,
    /// Second-moment estimate.
    pub v: Tensor,
}

/// Named trainable tensors with gradients and Adam state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    /// Adam steps taken.
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let z = Tensor::zeros(&value.shape);
        self.params.push(Param { name: name.into(), grad: z.clone(), m: z.clone(), v: z, value });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value.data
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value.data
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad.data
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad.data
    }

    /// Value and gradient of one parameter at once.
    pub fn split(&mut self, id: ParamId) -> (&[f64], &mut [f64]) {
        let p = &mut self.params[id.0];
        (&p.value.data, &mut p.grad.data)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn adam_step(&mut self, cfg: &Adam) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i];
                let m = cfg.beta1 * p.m.data[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.v.data[i] + (1.0 - cfg.beta2) * g * g;
                p.m.data[i] = m;
                p.v.data[i] = v;
                p.value.data[i] -= cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.gen_range(-bound..=bound)).collect() }
}

/// Xavier/Glorot uniform initialisation for a `fan_in × fan_out` matrix.
pub fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, &[fan_in, fan_out], (6.0 / (fan_in + fan_out) as f64).sqrt())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Affine map `y = xW + b` over rows of `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, input: usize, output: usize) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, input, output));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[output]));
        Self { w, b, input, output }
    }

    pub fn param_count(input: usize, output: usize) -> usize {
        input * output + output
    }

    /// `x` is `n × input` (flattened); returns `n × output`.
    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let n = x.len() / self.input;
        let b = store.value(self.b);
        let mut y: Vec<f64> = (0..n).flat_map(|_| b.iter().copied()).collect();
        matmul_into(x, store.value(self.w), &mut y, n, self.input, self.output);
        y
    }

    pub fn forward_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor, NnError> {
        if x.shape.last() != Some(&self.input) {
            return Err(NnError::Shape { left: x.shape.clone(), right: vec![self.input, self.output] });
        }
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = self.output;
        Ok(Tensor { shape, data: self.forward(store, &x.data) })
    }

    /// Accumulates `dW`, `db` and returns `dx`.
    pub fn backward(&self, store: &mut ParamStore, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let n = x.len() / self.input;
        let db = store.grad_mut(self.b);
        for r in dy.chunks_exact(self.output) {
            for (g, d) in db.iter_mut().zip(r) {
                *g += d;
            }
        }
        matmul_at_b_into(x, dy, store.grad_mut(self.w), n, self.input, self.output);
        let mut dx = vec![0.0; x.len()];
        matmul_a_bt_into(dy, store.value(self.w), &mut dx, n, self.output, self.input);
        dx
    }
}

pub fn tanh_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Gradient through `y = tanh(x)` given the forward output `y`.
pub fn tanh_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    y.iter().zip(dy).map(|(y, d)| d * (1.0 - y * y)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

/// LSTM weights. Gate blocks are ordered input, forget, candidate, output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    /// `input × 4h`.
    pub wx: ParamId,
    /// `h × 4h`.
    pub wh: ParamId,
    /// `4h`.
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// Forward activations of one cell step.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Gate activations `[i, f, g, o]`, each of length `h`.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqCache {
    pub direction: Direction,
    /// Cell caches in processing order.
    pub steps: Vec<CellCache>,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, input: usize, hidden: usize) -> Self {
        let h4 = 4 * hidden;
        let wx = store.add(format!("{name}.wx"), uniform(rng, &[input, h4], (6.0 / (input + hidden) as f64).sqrt()));
        let wh = store.add(format!("{name}.wh"), uniform(rng, &[hidden, h4], 1.0 / (hidden as f64).sqrt()));
        let mut bias = Tensor::zeros(&[h4]);
        bias.data[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        let b = store.add(format!("{name}.b"), bias);
        Self { wx, wh, b, input, hidden }
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden) + 4 * hidden
    }

    fn activate(&self, z: &mut [f64]) {
        let h = self.hidden;
        for (k, v) in z.iter_mut().enumerate() {
            *v = if (2 * h..3 * h).contains(&k) { v.tanh() } else { sigmoid(*v) };
        }
    }

    fn step_from_preact(&self, store: &ParamStore, mut z: Vec<f64>, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> CellCache {
        let h = self.hidden;
        matmul_into(h_prev, store.value(self.wh), &mut z, 1, h, 4 * h);
        self.activate(&mut z);
        let c: Vec<f64> = (0..h).map(|k| z[h + k] * c_prev[k] + z[k] * z[2 * h + k]).collect();
        let tanh_c = tanh_forward(&c);
        CellCache { x: x.to_vec(), h_prev: h_prev.to_vec(), c_prev: c_prev.to_vec(), gates: z, c, tanh_c }
    }

    /// One step: returns `(h', c')` and the cache.
    pub fn cell(&self, store: &ParamStore, x: &[f64], h: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>, CellCache), NnError> {
        if x.len() != self.input || h.len() != self.hidden || c.len() != self.hidden {
            return Err(NnError::Shape { left: vec![x.len(), h.len(), c.len()], right: vec![self.input, self.hidden, self.hidden] });
        }
        let mut z = store.value(self.b).to_vec();
        matmul_into(x, store.value(self.wx), &mut z, 1, self.input, 4 * self.hidden);
        let cache = self.step_from_preact(store, z, x, h, c);
        Ok((cache.h(), cache.c.clone(), cache))
    }

    /// Backward through one step. Returns `(dx, dh_prev, dc_prev)`.
    pub fn cell_backward(&self, store: &mut ParamStore, cache: &CellCache, dh: &[f64], dc: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let dz = self.gate_grads(cache, dh, dc);
        let dc_prev = (0..self.hidden).map(|k| dc_total(cache, dh, dc, k, self.hidden) * cache.gates[self.hidden + k]).collect();
        matmul_at_b_into(&cache.x, &dz, store.grad_mut(self.wx), 1, self.input, 4 * self.hidden);
        matmul_at_b_into(&cache.h_prev, &dz, store.grad_mut(self.wh), 1, self.hidden, 4 * self.hidden);
        store.grad_mut(self.b).iter_mut().zip(&dz).for_each(|(g, d)| *g += d);
        let mut dx = vec![0.0; self.input];
        matmul_a_bt_into(&dz, store.value(self.wx), &mut dx, 1, 4 * self.hidden, self.input);
        let mut dh_prev = vec![0.0; self.hidden];
        matmul_a_bt_into(&dz, store.value(self.wh), &mut dh_prev, 1, 4 * self.hidden, self.hidden);
        (dx, dh_prev, dc_prev)
    }

    fn gate_grads(&self, cache: &CellCache, dh: &[f64], dc: &[f64]) -> Vec<f64> {
        let h = self.hidden;
        let g = &cache.gates;
        let mut dz = vec![0.0; 4 * h];
        for k in 0..h {
            let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
            let dct = dc_total(cache, dh, dc, k, h);
            dz[k] = dct * gg * i * (1.0 - i);
            dz[h + k] = dct * cache.c_prev[k] * f * (1.0 - f);
            dz[2 * h + k] = dct * i * (1.0 - gg * gg);
            dz[3 * h + k] = dh[k] * cache.tanh_c[k] * o * (1.0 - o);
        }
        dz
    }

    /// Runs the cell over `xs` (`T × input`) from zero state. The output is
    /// `T × h` in original time order for both directions.
    pub fn forward(&self, store: &ParamStore, xs: &[f64], direction: Direction) -> (Vec<f64>, SeqCache) {
        let (n, h) = (xs.len() / self.input, self.hidden);
        let mut pre: Vec<f64> = (0..n).flat_map(|_| store.value(self.b).iter().copied()).collect();
        matmul_into(xs, store.value(self.wx), &mut pre, n, self.input, 4 * h);
        let mut hs = vec![0.0; n * h];
        let mut steps = Vec::with_capacity(n);
        let (mut hp, mut cp) = (vec![0.0; h], vec![0.0; h]);
        for s in 0..n {
            let t = order(direction, n, s);
            let z = pre[t * 4 * h..(t + 1) * 4 * h].to_vec();
            let cache = self.step_from_preact(store, z, &xs[t * self.input..(t + 1) * self.input], &hp, &cp);
            hp = cache.h();
            cp.clone_from(&cache.c);
            hs[t * h..(t + 1) * h].copy_from_slice(&hp);
            steps.push(cache);
        }
        (hs, SeqCache { direction, steps })
    }

    /// Backward through the unrolled sequence given `dhs` (`T × h`, original
    /// time order). Returns `dxs` in original order.
    pub fn backward(&self, store: &mut ParamStore, cache: &SeqCache, dhs: &[f64]) -> Vec<f64> {
        let (n, h, inp) = (cache.steps.len(), self.hidden, self.input);
        let mut dz_all = vec![0.0; n * 4 * h];
        let mut xs = vec![0.0; n * inp];
        let mut hps = vec![0.0; n * h];
        let (mut dh_next, mut dc_next) = (vec![0.0; h], vec![0.0; h]);
        let wh = store.value(self.wh).to_vec();
        for s in (0..n).rev() {
            let t = order(cache.direction, n, s);
            let step = &cache.steps[s];
            let dh: Vec<f64> = (0..h).map(|k| dhs[t * h + k] + dh_next[k]).collect();
            let dz = self.gate_grads(step, &dh, &dc_next);
            dc_next = (0..h).map(|k| dc_total(step, &dh, &dc_next, k, h) * step.gates[h + k]).collect();
            dh_next = vec![0.0; h];
            matmul_a_bt_into(&dz, &wh, &mut dh_next, 1, 4 * h, h);
            dz_all[t * 4 * h..(t + 1) * 4 * h].copy_from_slice(&dz);
            xs[t * inp..(t + 1) * inp].copy_from_slice(&step.x);
            hps[t * h..(t + 1) * h].copy_from_slice(&step.h_prev);
        }
        matmul_at_b_into(&xs, &dz_all, store.grad_mut(self.wx), n, inp, 4 * h);
        matmul_at_b_into(&hps, &dz_all, store.grad_mut(self.wh), n, h, 4 * h);
        let db = store.grad_mut(self.b);
        for r in dz_all.chunks_exact(4 * h) {
            db.iter_mut().zip(r).for_each(|(g, d)| *g += d);
        }
        let mut dxs = vec![0.0; n * inp];
        matmul_a_bt_into(&dz_all, store.value(self.wx), &mut dxs, n, 4 * h, inp);
        dxs
    }
}

impl CellCache {
    pub fn h(&self) -> Vec<f64> {
        let h = self.c.len();
        (0..h).map(|k| self.gates[3 * h + k] * self.tanh_c[k]).collect()
    }
}

fn dc_total(cache: &CellCache, dh: &[f64], dc: &[f64], k: usize, h: usize) -> f64 {
    let o = cache.gates[3 * h + k];
    let tc = cache.tanh_c[k];
    dc[k] + dh[k] * o * (1.0 - tc * tc)
}

fn order(direction: Direction, n: usize, s: usize) -> usize {
    match direction {
        Direction::Forward => s,
        Direction::Backward => n - 1 - s,
    }
}

/// Forward and backward LSTMs whose outputs are concatenated per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiCache {
    pub fwd: SeqCache,
    pub bwd: SeqCache,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            fwd: Lstm::new(store, rng, &format!("{name}.fwd"), input, hidden),
            bwd: Lstm::new(store, rng, &format!("{name}.bwd"), input, hidden),
        }
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        2 * Lstm::param_count(input, hidden)
    }

    /// Returns `T × 2h`: forward state then backward state per step.
    pub fn forward(&self, store: &ParamStore, xs: &[f64]) -> (Vec<f64>, BiCache) {
        let h = self.fwd.hidden;
        let (a, ca) = self.fwd.forward(store, xs, Direction::Forward);
        let (b, cb) = self.bwd.forward(store, xs, Direction::Backward);
        let out = a.chunks_exact(h).zip(b.chunks_exact(h)).flat_map(|(x, y)| x.iter().chain(y).copied()).collect();
        (out, BiCache { fwd: ca, bwd: cb })
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &BiCache, dys: &[f64]) -> Vec<f64> {
        let h = self.fwd.hidden;
        let (mut da, mut db) = (Vec::with_capacity(dys.len() / 2), Vec::with_capacity(dys.len() / 2));
        for r in dys.chunks_exact(2 * h) {
            da.extend_from_slice(&r[..h]);
            db.extend_from_slice(&r[h..]);
        }
        let mut dx = self.fwd.backward(store, &cache.fwd, &da);
        for (d, e) in dx.iter_mut().zip(self.bwd.backward(store, &cache.bwd, &db)) {
            *d += e;
        }
        dx
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &mut [f64], cols: usize) {
    for r in x.chunks_exact_mut(cols) {
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in r.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        r.iter_mut().for_each(|v| *v /= s);
    }
}

/// Multi-head self-attention without biases: per head
/// `softmax(QKᵀ/√d_k)V`, heads concatenated and projected by `W_O`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub d_model: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache {
    pub x: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Per head, `T × T` attention probabilities.
    pub probs: Vec<Vec<f64>>,
    /// Concatenated head outputs, `T × d_model`.
    pub concat: Vec<f64>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize, heads: usize) -> Result<Self, NnError> {
        if heads == 0 || d_model % heads != 0 {
            return Err(NnError::Heads { d_model, heads });
        }
        let mut w = |s: &str| store.add(format!("{name}.{s}"), xavier(rng, d_model, d_model));
        Ok(Self { wq: w("wq"), wk: w("wk"), wv: w("wv"), wo: w("wo"), d_model, heads })
    }

    pub fn param_count(d_model: usize) -> usize {
        4 * d_model * d_model
    }

    fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    fn head_cols(&self, m: &[f64], t: usize, head: usize) -> Vec<f64> {
        let (d, dk) = (self.d_model, self.d_k());
        (0..t).flat_map(|r| m[r * d + head * dk..r * d + (head + 1) * dk].iter().copied()).collect()
    }

    /// `x` is `T × d_model`.
    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> (Vec<f64>, AttentionCache) {
        let (d, dk) = (self.d_model, self.d_k());
        let t = x.len() / d;
        let proj = |w: ParamId| {
            let mut out = vec![0.0; t * d];
            matmul_into(x, store.value(w), &mut out, t, d, d);
            out
        };
        let (q, k, v) = (proj(self.wq), proj(self.wk), proj(self.wv));
        let scale = 1.0 / (dk as f64).sqrt();
        let mut concat = vec![0.0; t * d];
        let mut probs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let (qh, kh, vh) = (self.head_cols(&q, t, hd), self.head_cols(&k, t, hd), self.head_cols(&v, t, hd));
            let mut s = vec![0.0; t * t];
            matmul_a_bt_into(&qh, &kh, &mut s, t, dk, t);
            s.iter_mut().for_each(|v| *v *= scale);
            softmax_rows(&mut s, t);
            let mut oh = vec![0.0; t * dk];
            matmul_into(&s, &vh, &mut oh, t, t, dk);
            for r in 0..t {
                concat[r * d + hd * dk..r * d + (hd + 1) * dk].copy_from_slice(&oh[r * dk..(r + 1) * dk]);
            }
            probs.push(s);
        }
        let mut y = vec![0.0; t * d];
        matmul_into(&concat, store.value(self.wo), &mut y, t, d, d);
        (y, AttentionCache { x: x.to_vec(), q, k, v, probs, concat })
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &AttentionCache, dy: &[f64]) -> Vec<f64> {
        let (d, dk) = (self.d_model, self.d_k());
        let t = cache.x.len() / d;
        let scale = 1.0 / (dk as f64).sqrt();
        matmul_at_b_into(&cache.concat, dy, store.grad_mut(self.wo), t, d, d);
        let mut dconcat = vec![0.0; t * d];
        matmul_a_bt_into(dy, store.value(self.wo), &mut dconcat, t, d, d);
        let (mut dq, mut dk_all, mut dv) = (vec![0.0; t * d], vec![0.0; t * d], vec![0.0; t * d]);
        for hd in 0..self.heads {
            let p = &cache.probs[hd];
            let doh = self.head_cols(&dconcat, t, hd);
            let (qh, kh, vh) = (self.head_cols(&cache.q, t, hd), self.head_cols(&cache.k, t, hd), self.head_cols(&cache.v, t, hd));
            let mut dp = vec![0.0; t * t];
            matmul_a_bt_into(&doh, &vh, &mut dp, t, dk, t);
            let mut dvh = vec![0.0; t * dk];
            matmul_at_b_into(p, &doh, &mut dvh, t, t, dk);
            let mut ds = vec![0.0; t * t];
            for r in 0..t {
                let row = r * t..(r + 1) * t;
                let dot: f64 = dp[row.clone()].iter().zip(&p[row.clone()]).map(|(a, b)| a * b).sum();
                for c in row {
                    ds[c] = p[c] * (dp[c] - dot) * scale;
                }
            }
            let mut dqh = vec![0.0; t * dk];
            matmul_into(&ds, &kh, &mut dqh, t, t, dk);
            let mut dkh = vec![0.0; t * dk];
            matmul_at_b_into(&ds, &qh, &mut dkh, t, t, dk);
            for r in 0..t {
                let dst = r * d + hd * dk..r * d + (hd + 1) * dk;
                let src = r * dk..(r + 1) * dk;
                dq[dst.clone()].copy_from_slice(&dqh[src.clone()]);
                dk_all[dst.clone()].copy_from_slice(&dkh[src.clone()]);
                dv[dst].copy_from_slice(&dvh[src]);
            }
        }
        let mut dx = vec![0.0; t * d];
        for (w, g) in [(self.wq, &dq), (self.wk, &dk_all), (self.wv, &dv)] {
            matmul_at_b_into(&cache.x, g, store.grad_mut(w), t, d, d);
            matmul_a_bt_into(g, store.value(w), &mut dx, t, d, d);
        }
        dx
    }
}

/// Inverted dropout. With `rng = None` (evaluation) or `rate = 0` it is the
/// identity and the returned mask is empty.
pub fn dropout(x: &[f64], rate: f64, rng: Option<&mut Rng>) -> (Vec<f64>, Vec<f64>) {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = x.iter().map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
            (x.iter().zip(&mask).map(|(a, m)| a * m).collect(), mask)
        }
        _ => (x.to_vec(), Vec::new()),
    }
}

pub fn dropout_backward(dy: &[f64], mask: &[f64]) -> Vec<f64> {
    if mask.is_empty() {
        dy.to_vec()
    } else {
        dy.iter().zip(mask).map(|(d, m)| d * m).collect()
    }
}

/// Worst disagreement found by [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name (or `input[i]`) and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients with central differences for every parameter
/// and input entry.
///
/// `f(store, inputs, backprop)` must return the scalar loss; when `backprop`
/// is true it must also leave parameter gradients in `store` (starting from
/// zero) and return the input gradients.
pub fn gradient_check<F>(store: &mut ParamStore, inputs: &mut [Vec<f64>], step: f64, mut f: F) -> GradCheck
where
    F: FnMut(&mut ParamStore, &[Vec<f64>], bool) -> (f64, Vec<Vec<f64>>),
{
    store.zero_grad();
    let (_, dinputs) = f(store, inputs, true);
    let analytic: Vec<Vec<f64>> = store.params().iter().map(|p| p.grad.data.clone()).collect();
    let mut report = GradCheck { max_rel_error: 0.0, worst: (String::new(), 0), checked: 0 };
    let mut note = |err: f64, name: String, i: usize| {
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (name, i);
        }
    };
    for (pi, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = store.params()[pi].value.data[i];
            store.params_mut()[pi].value.data[i] = orig + step;
            let up = f(store, inputs, false).0;
            store.params_mut()[pi].value.data[i] = orig - step;
            let down = f(store, inputs, false).0;
            store.params_mut()[pi].value.data[i] = orig;
            note(relative_error(a, (up - down) / (2.0 * step)), store.params()[pi].name.clone(), i);
        }
    }
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k][i];
            inputs[k][i] = orig + step;
            let up = f(store, inputs, false).0;
            inputs[k][i] = orig - step;
            let down = f(store, inputs, false).0;
            inputs[k][i] = orig;
            let a = dinputs.get(k).map_or(0.0, |g| g[i]);
            note(relative_error(a, (up - down) / (2.0 * step)), format!("input[{k}]"), i);
        }
    }
    report
}
