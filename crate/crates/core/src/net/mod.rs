//! Feedforward value network `v(x; θ)` with exact spatial derivatives.
//!
//! Every hidden unit carries, besides its activation `h`, the Jacobian row
//! `∂h/∂x` and the weighted second-order term `tr(S ∇²h)` with `S = σσᵀ`.
//! These propagate exactly through affine maps and the chain rule for the
//! activation, so the PDE residual
//!
//! ```text
//! r(x) = λ v(x) - ½ tr(S ∇²v(x)) - b(x,a)·∇v(x) - L(x,a)
//! ```
//!
//! is available without finite differencing. The reverse pass differentiates
//! the squared residual through that same propagation.
//!
//! Batches are processed as column blocks of one matrix per layer:
//! `[values (N) | Jacobians (N·d, point-major) | traces (N)]`, so every layer
//! costs a single GEMM forward and two backward.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, ProblemRef};

use nalgebra::DMatrix;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::seeded_rng;
use crate::error::{Error, Result};
use crate::problems::ControlProblem;

/// Points per parallel work item. Fixed so results do not depend on the
/// number of threads.
pub const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// `z²`. Lets fixtures represent quadratics exactly.
    Square,
    Identity,
}

impl Activation {
    /// `(s, s', s'', s''')` at `z`.
    #[inline]
    fn derivatives(self, z: f64) -> (f64, f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                let s1 = 1.0 - t * t;
                let s2 = -2.0 * t * s1;
                let s3 = s1 * (4.0 * t * t - 2.0 * s1);
                (t, s1, s2, s3)
            }
            Activation::Square => (z * z, 2.0 * z, 2.0, 0.0),
            Activation::Identity => (z, 1.0, 0.0, 0.0),
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Square => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Square),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Default hidden layout: three layers of 64 units up to `d = 5`, 128 beyond.
pub fn default_architecture(d: usize) -> Vec<usize> {
    let h = if d <= 5 { 64 } else { 128 };
    vec![d, h, h, h, 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    /// Offset of each layer's weight block; its bias follows immediately.
    offsets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeBundle {
    pub value: f64,
    pub grad: Vec<f64>,
    /// `tr(σσᵀ ∇²v)`.
    pub weighted_trace: f64,
    pub hessian: Option<DMatrix<f64>>,
}

/// Batched network outputs; `grads` is row-major `N × d`.
#[derive(Debug, Clone, Default)]
pub struct BatchEval {
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    pub traces: Vec<f64>,
}

/// What a forward pass propagates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outputs {
    Value,
    Gradient,
    Full,
}

/// `σσᵀ` in the form the propagation needs.
#[derive(Debug, Clone)]
pub(crate) enum Metric {
    Diagonal(Vec<f64>),
    Dense(Vec<f64>),
}

impl Metric {
    pub(crate) fn new(s: &DMatrix<f64>) -> Self {
        let d = s.nrows();
        let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || s[(i, j)] == 0.0));
        if diagonal {
            Metric::Diagonal((0..d).map(|i| s[(i, i)]).collect())
        } else {
            Metric::Dense((0..d).flat_map(|i| (0..d).map(move |j| s[(i, j)])).collect())
        }
    }

    /// Writes `S v` into `out` and returns `vᵀ S v`.
    #[inline]
    fn apply(&self, v: &[f64], out: &mut [f64]) -> f64 {
        match self {
            Metric::Diagonal(diag) => {
                let mut q = 0.0;
                for k in 0..v.len() {
                    out[k] = diag[k] * v[k];
                    q += out[k] * v[k];
                }
                q
            }
            Metric::Dense(s) => {
                let d = v.len();
                let mut q = 0.0;
                for i in 0..d {
                    let row = &s[i * d..(i + 1) * d];
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += row[j] * v[j];
                    }
                    out[i] = acc;
                    q += acc * v[i];
                }
                q
            }
        }
    }
}

/// Column layout of one batch block.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    d: usize,
    grad: bool,
    trace: bool,
}

impl Layout {
    fn new(n: usize, d: usize, outputs: Outputs) -> Self {
        Self {
            n,
            d,
            grad: outputs != Outputs::Value,
            trace: outputs == Outputs::Full,
        }
    }
    fn cols(&self) -> usize {
        self.n * (1 + if self.grad { self.d } else { 0 } + usize::from(self.trace))
    }
    #[inline]
    fn jac(&self, p: usize) -> usize {
        self.n + p * self.d
    }
    #[inline]
    fn tr(&self, p: usize) -> usize {
        self.n * (1 + self.d) + p
    }
}

/// Per-layer state kept for the reverse pass.
struct Tape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ValueNet {
    /// Xavier-uniform weights, zero biases.
    pub fn init(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(widths, activation)?;
        let mut rng = seeded_rng(seed, 0x4e7);
        for l in 0..net.n_layers() {
            let (fan_out, fan_in) = (widths[l + 1], widths[l]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let off = net.offsets[l];
            for w in &mut net.params[off..off + fan_in * fan_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        if *widths.last().unwrap() != 1 {
            return Err(Error::Config("the output layer must have width 1".into()));
        }
        let mut offsets = Vec::with_capacity(widths.len() - 1);
        let mut total = 0;
        for w in widths.windows(2) {
            offsets.push(total);
            total += w[0] * w[1] + w[1];
        }
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            params: vec![0.0; total],
            offsets,
        })
    }

    pub fn from_params(widths: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(widths, activation)?;
        if params.len() != net.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }
    pub fn activation(&self) -> Activation {
        self.activation
    }
    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }
    pub fn n_params(&self) -> usize {
        self.params.len()
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Weight matrix (`out × in`) and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, &[f64]) {
        let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
        let off = self.offsets[l];
        let w = ArrayView2::from_shape((n_out, n_in), &self.params[off..off + n_in * n_out])
            .expect("layer shape");
        (w, &self.params[off + n_in * n_out..off + n_in * n_out + n_out])
    }

    /// Mutable weight matrix and bias of layer `l`.
    pub fn layer_mut(&mut self, l: usize) -> (ArrayViewMut2<'_, f64>, &mut [f64]) {
        let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
        let off = self.offsets[l];
        let (w, rest) = self.params[off..].split_at_mut(n_in * n_out);
        let w = ArrayViewMut2::from_shape((n_out, n_in), w).expect("layer shape");
        (w, &mut rest[..n_out])
    }

    /// Value, gradient and weighted Hessian trace at one point.
    pub fn eval_bundle(&self, x: &[f64], sigma_sq: &DMatrix<f64>, need_full_hessian: bool) -> DerivativeBundle {
        assert_eq!(x.len(), self.input_dim(), "input dimension");
        let metric = Metric::new(sigma_sq);
        let tape = self.forward(x, Layout::new(1, x.len(), Outputs::Full), &metric);
        let lay = Layout::new(1, x.len(), Outputs::Full);
        let out = tape.output.row(0);
        let grad: Vec<f64> = (0..x.len()).map(|k| out[lay.jac(0) + k]).collect();
        let hessian = need_full_hessian.then(|| self.hessian(x));
        DerivativeBundle {
            value: out[0],
            grad,
            weighted_trace: out[lay.tr(0)],
            hessian,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let tape = self.forward(x, Layout::new(1, x.len(), Outputs::Value), &Metric::Diagonal(vec![]));
        tape.output[(0, 0)]
    }

    /// Batched evaluation over row-major `points` (`N × d`). Parallel over
    /// fixed-size chunks; the result is independent of the thread count.
    pub fn eval_batch(&self, points: &[f64], sigma_sq: Option<&DMatrix<f64>>, outputs: Outputs) -> BatchEval {
        let d = self.input_dim();
        assert_eq!(points.len() % d, 0, "points must be N × d");
        let metric = match (outputs, sigma_sq) {
            (Outputs::Full, Some(s)) => Metric::new(s),
            (Outputs::Full, None) => panic!("full outputs need σσᵀ"),
            _ => Metric::Diagonal(vec![]),
        };
        let parts: Vec<BatchEval> = points
            .par_chunks(CHUNK * d)
            .map(|chunk| {
                let n = chunk.len() / d;
                let lay = Layout::new(n, d, outputs);
                let tape = self.forward(chunk, lay, &metric);
                let row = tape.output.row(0);
                let mut e = BatchEval {
                    values: row.slice(s![..n]).to_vec(),
                    ..Default::default()
                };
                if lay.grad {
                    e.grads = row.slice(s![n..n + n * d]).to_vec();
                }
                if lay.trace {
                    e.traces = row.slice(s![n * (1 + d)..]).to_vec();
                }
                e
            })
            .collect();
        let mut out = BatchEval::default();
        for p in parts {
            out.values.extend(p.values);
            out.grads.extend(p.grads);
            out.traces.extend(p.traces);
        }
        out
    }

    fn forward(&self, points: &[f64], lay: Layout, metric: &Metric) -> Tape {
        let d = lay.d;
        let n = lay.n;
        let cols = lay.cols();
        let mut x0 = Array2::<f64>::zeros((d, cols));
        for p in 0..n {
            for k in 0..d {
                x0[(k, p)] = points[p * d + k];
                if lay.grad {
                    x0[(k, lay.jac(p) + k)] = 1.0;
                }
            }
        }
        let mut inputs = Vec::with_capacity(self.n_layers());
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut cur = x0;
        let mut sv = vec![0.0; d];
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let n_out = w.nrows();
            let mut z = Array2::<f64>::zeros((n_out, cols));
            general_mat_mul(1.0, &w, &cur, 0.0, &mut z);
            for i in 0..n_out {
                for p in 0..n {
                    z[(i, p)] += b[i];
                }
            }
            if l + 1 == self.n_layers() {
                inputs.push(cur);
                return Tape {
                    inputs,
                    pre,
                    output: z,
                };
            }
            let mut h = Array2::<f64>::zeros((n_out, cols));
            for i in 0..n_out {
                let zr = z.row(i);
                let zr = zr.as_slice().expect("row-major");
                let mut hr = h.row_mut(i);
                let hr = hr.as_slice_mut().expect("row-major");
                for p in 0..n {
                    let (sz, s1, s2, _) = self.activation.derivatives(zr[p]);
                    hr[p] = sz;
                    if lay.grad {
                        let j = lay.jac(p);
                        for k in 0..d {
                            hr[j + k] = s1 * zr[j + k];
                        }
                        if lay.trace {
                            let q = metric.apply(&zr[j..j + d], &mut sv);
                            hr[lay.tr(p)] = s2 * q + s1 * zr[lay.tr(p)];
                        }
                    }
                }
            }
            inputs.push(cur);
            pre.push(z);
            cur = h;
        }
        unreachable!("network has at least one layer")
    }

    /// Full spatial Hessian by direct propagation of `∇²h` through the layers.
    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = x.len();
        let mut h: Vec<f64> = x.to_vec();
        let mut jac: Vec<DMatrix<f64>> = (0..d)
            .map(|k| {
                let mut e = DMatrix::zeros(1, d);
                e[(0, k)] = 1.0;
                e
            })
            .collect();
        let mut hess: Vec<DMatrix<f64>> = vec![DMatrix::zeros(d, d); d];
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let last = l + 1 == self.n_layers();
            let mut nh = Vec::with_capacity(w.nrows());
            let mut nj = Vec::with_capacity(w.nrows());
            let mut nhess = Vec::with_capacity(w.nrows());
            for i in 0..w.nrows() {
                let mut z = b[i];
                let mut jz = DMatrix::zeros(1, d);
                let mut hz = DMatrix::zeros(d, d);
                for j in 0..w.ncols() {
                    let wij = w[(i, j)];
                    z += wij * h[j];
                    jz += &jac[j] * wij;
                    hz += &hess[j] * wij;
                }
                if last {
                    nh.push(z);
                    nj.push(jz);
                    nhess.push(hz);
                } else {
                    let (sz, s1, s2, _) = self.activation.derivatives(z);
                    nh.push(sz);
                    nhess.push(jz.transpose() * &jz * s2 + hz * s1);
                    nj.push(jz * s1);
                }
            }
            h = nh;
            jac = nj;
            hess = nhess;
        }
        hess.pop().expect("scalar output")
    }

    /// Mean squared residual over a frozen batch and its exact gradient with
    /// respect to all parameters.
    pub fn loss_and_grad_frozen(&self, batch: &FrozenBatch, sigma_sq: &DMatrix<f64>, lambda: f64) -> Result<(f64, Vec<f64>)> {
        let d = self.input_dim();
        let n_total = batch.len();
        if n_total == 0 {
            return Err(Error::Config("empty collocation batch".into()));
        }
        let metric = Metric::new(sigma_sq);
        let scale = 1.0 / n_total as f64;
        let parts: Vec<(f64, Vec<f64>, Option<usize>)> = (0..n_total)
            .step_by(CHUNK)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|start| {
                let end = (start + CHUNK).min(n_total);
                self.chunk_loss_grad(batch, start, end, &metric, lambda, scale, d)
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.n_params()];
        for (l, g, bad) in parts {
            if let Some(i) = bad {
                return Err(Error::Numerical(format!(
                    "non-finite residual at collocation point {i}"
                )));
            }
            loss += l;
            for (acc, v) in grad.iter_mut().zip(&g) {
                *acc += v;
            }
        }
        Ok((loss, grad))
    }

    #[allow(clippy::too_many_arguments)]
    fn chunk_loss_grad(
        &self,
        batch: &FrozenBatch,
        start: usize,
        end: usize,
        metric: &Metric,
        lambda: f64,
        scale: f64,
        d: usize,
    ) -> (f64, Vec<f64>, Option<usize>) {
        let n = end - start;
        let lay = Layout::new(n, d, Outputs::Full);
        let tape = self.forward(&batch.points[start * d..end * d], lay, metric);
        let out = tape.output.row(0);

        // adjoint of the output row
        let mut g_out = Array2::<f64>::zeros((1, lay.cols()));
        let mut loss = 0.0;
        let mut bad = None;
        for p in 0..n {
            let gi = start + p;
            let c = &batch.drifts[gi * d..(gi + 1) * d];
            let j = lay.jac(p);
            let mut adv = 0.0;
            for k in 0..d {
                adv += c[k] * out[j + k];
            }
            let r = lambda * out[p] - 0.5 * out[lay.tr(p)] - adv - batch.costs[gi];
            if !r.is_finite() && bad.is_none() {
                bad = Some(gi);
            }
            loss += r * r * scale;
            let rho = 2.0 * r * scale;
            g_out[(0, p)] = rho * lambda;
            for k in 0..d {
                g_out[(0, j + k)] = -rho * c[k];
            }
            g_out[(0, lay.tr(p))] = -0.5 * rho;
        }

        let mut grad = vec![0.0; self.n_params()];
        let mut upstream = g_out;
        let mut sv = vec![0.0; d];
        for l in (0..self.n_layers()).rev() {
            let (w, _) = self.layer(l);
            let (n_out, n_in) = w.dim();
            let z_bar = if l + 1 == self.n_layers() {
                upstream
            } else {
                let z = &tape.pre[l];
                let mut zb = Array2::<f64>::zeros(z.dim());
                for i in 0..n_out {
                    let zr = z.row(i);
                    let zr = zr.as_slice().expect("row-major");
                    let ur = upstream.row(i);
                    let ur = ur.as_slice().expect("row-major");
                    let mut br = zb.row_mut(i);
                    let br = br.as_slice_mut().expect("row-major");
                    for p in 0..n {
                        let (_, s1, s2, s3) = self.activation.derivatives(zr[p]);
                        let j = lay.jac(p);
                        let t = lay.tr(p);
                        let jz = &zr[j..j + d];
                        let q = metric.apply(jz, &mut sv);
                        let tbar = ur[t];
                        let mut jdot = 0.0;
                        for k in 0..d {
                            jdot += ur[j + k] * jz[k];
                            br[j + k] = s1 * ur[j + k] + 2.0 * tbar * s2 * sv[k];
                        }
                        br[p] = s1 * ur[p] + s2 * jdot + tbar * (s3 * q + s2 * zr[t]);
                        br[t] = tbar * s1;
                    }
                }
                zb
            };
            let off = self.offsets[l];
            {
                let input = &tape.inputs[l];
                let mut gw = ArrayViewMut2::from_shape((n_out, n_in), &mut grad[off..off + n_out * n_in])
                    .expect("layer shape");
                general_mat_mul(1.0, &z_bar, &input.t(), 0.0, &mut gw);
                let gb = &mut grad[off + n_out * n_in..off + n_out * n_in + n_out];
                for i in 0..n_out {
                    gb[i] = z_bar.row(i).slice(s![..n]).sum();
                }
            }
            if l > 0 {
                let mut next = Array2::<f64>::zeros((n_in, lay.cols()));
                general_mat_mul(1.0, &w.t(), &z_bar, 0.0, &mut next);
                upstream = next;
            } else {
                break;
            }
        }
        (loss, grad, bad)
    }
}

/// Collocation points with the frozen drift `b(x_i, a_i)` and reward
/// `L(x_i, a_i)` already evaluated.
#[derive(Debug, Clone, Default)]
pub struct FrozenBatch {
    pub points: Vec<f64>,
    pub drifts: Vec<f64>,
    pub costs: Vec<f64>,
}

impl FrozenBatch {
    /// Evaluate drift and reward at `(points_i, actions_i)`.
    pub fn new(problem: &ControlProblem, points: Vec<f64>, actions: &[f64]) -> Self {
        let d = problem.state_dim();
        let m = problem.action_dim();
        let n = points.len() / d;
        let mut drifts = vec![0.0; n * d];
        let mut costs = vec![0.0; n];
        for i in 0..n {
            let x = &points[i * d..(i + 1) * d];
            let a = &actions[i * m..(i + 1) * m];
            problem.drift_into(x, a, &mut drifts[i * d..(i + 1) * d]);
            costs[i] = problem.cost(x, a);
        }
        Self {
            points,
            drifts,
            costs,
        }
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }
}

/// `λv - ½ tr(σσᵀ∇²v) - b(x,a)·∇v - L(x,a)` at one point.
pub fn residual_at(net: &ValueNet, problem: &ControlProblem, x: &[f64], a: &[f64]) -> f64 {
    let bundle = net.eval_bundle(x, problem.sigma_sq(), false);
    let mut b = vec![0.0; x.len()];
    problem.drift_into(x, a, &mut b);
    let adv: f64 = b.iter().zip(&bundle.grad).map(|(u, v)| u * v).sum();
    problem.lambda() * bundle.value - 0.5 * bundle.weighted_trace - adv - problem.cost(x, a)
}

/// Residuals over a frozen batch, batched and in parallel.
pub fn residuals_frozen(net: &ValueNet, batch: &FrozenBatch, sigma_sq: &DMatrix<f64>, lambda: f64) -> Vec<f64> {
    let d = net.input_dim();
    let e = net.eval_batch(&batch.points, Some(sigma_sq), Outputs::Full);
    (0..batch.len())
        .map(|i| {
            let adv: f64 = (0..d).map(|k| batch.drifts[i * d + k] * e.grads[i * d + k]).sum();
            lambda * e.values[i] - 0.5 * e.traces[i] - adv - batch.costs[i]
        })
        .collect()
}

/// Mean squared residual over `points` with per-point `actions`, and its
/// exact parameter gradient.
pub fn loss_and_param_grad(
    net: &ValueNet,
    problem: &ControlProblem,
    points: &[f64],
    actions: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let batch = FrozenBatch::new(problem, points.to_vec(), actions);
    net.loss_and_grad_frozen(&batch, problem.sigma_sq(), problem.lambda())
}
