//! Control problems: controlled diffusion `dX = b(X,a) dt + σ dW`, reward rate
//! `L(x,a)` (maximized), discount `λ`, box action set and box training domain.
//!
//! The catalog holds the constrained LQR family, the stochastic pendulum and
//! cart-pole, a constant-reward fixture with a known value function, and a
//! closure-backed problem for ad-hoc fixtures.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{seeded_rng, BoxSet};
use crate::error::{Error, Result};

/// How the action enters drift and reward. Drives the choice of greedy solver.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlStructure {
    /// `b = f(x) + G(x) a` and `L = -aᵀRa + ℓ(x)` with `R` symmetric positive definite.
    AffineQuadratic { r: DMatrix<f64>, r_diagonal: bool },
    /// Neither drift nor reward depend on the action.
    ActionIndependent,
    General,
}

/// Model equations of a control problem. Implementations are pure.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn drift(&self, x: &[f64], a: &[f64], out: &mut [f64]);
    fn cost(&self, x: &[f64], a: &[f64]) -> f64;

    fn structure(&self) -> ControlStructure {
        ControlStructure::General
    }

    /// `G(x) = ∂b/∂a`, `d × m`. Only meaningful for affine drifts.
    fn control_matrix(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// Analytic `div_x b(x, a)` when available.
    fn divergence(&self, _x: &[f64], _a: &[f64]) -> Option<f64> {
        None
    }

    /// Map a state to its canonical representative (e.g. wrap angles).
    fn canonicalize(&self, _x: &mut [f64]) {}
}

#[derive(Debug, Clone)]
pub struct ControlProblem {
    name: String,
    dynamics: Arc<dyn Dynamics>,
    sigma: DMatrix<f64>,
    sigma_sq: DMatrix<f64>,
    lambda: f64,
    action_box: BoxSet,
    domain: BoxSet,
    structure: ControlStructure,
    noiseless: bool,
}

impl ControlProblem {
    /// Validates dimensions, `λ > 0`, and that `σσᵀ` is positive definite.
    pub fn new(
        name: impl Into<String>,
        dynamics: Arc<dyn Dynamics>,
        sigma: DMatrix<f64>,
        lambda: f64,
        action_box: BoxSet,
        domain: BoxSet,
    ) -> Result<Self> {
        let d = dynamics.state_dim();
        let m = dynamics.action_dim();
        if d == 0 || m == 0 {
            return Err(Error::Config("state and action dimensions must be positive".into()));
        }
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::Config(format!(
                "sigma must be {d}x{d}, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if action_box.dim() != m {
            return Err(Error::Config(format!(
                "action box has dimension {} but the model expects {m}",
                action_box.dim()
            )));
        }
        if domain.dim() != d {
            return Err(Error::Config(format!(
                "domain has dimension {} but the model expects {d}",
                domain.dim()
            )));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::Config(format!("discount rate must be positive, got {lambda}")));
        }
        let sigma_sq = &sigma * sigma.transpose();
        let (nu, _) = eigen_range(&sigma_sq);
        if nu <= 0.0 {
            return Err(Error::Assumption(format!(
                "σσᵀ is not positive definite (smallest eigenvalue {nu:e})"
            )));
        }
        let structure = dynamics.structure();
        if let ControlStructure::AffineQuadratic { r, .. } = &structure {
            let (r_min, _) = eigen_range(&(0.5 * (r + r.transpose())));
            if r_min <= 1e-12 {
                return Err(Error::Assumption(
                    "action penalty R is not positive definite; greedy selector is not unique".into(),
                ));
            }
        }
        Ok(Self {
            name: name.into(),
            dynamics,
            sigma,
            sigma_sq,
            lambda,
            action_box,
            domain,
            structure,
            noiseless: false,
        })
    }

    /// Copy with `σ = 0`, for deterministic simulation. Such a problem no
    /// longer satisfies uniform ellipticity and is rejected by
    /// [`validate_assumptions`].
    pub fn noiseless(&self) -> Self {
        let d = self.state_dim();
        Self {
            sigma: DMatrix::zeros(d, d),
            sigma_sq: DMatrix::zeros(d, d),
            noiseless: true,
            ..self.clone()
        }
    }

    pub fn with_domain(mut self, domain: BoxSet) -> Result<Self> {
        if domain.dim() != self.state_dim() {
            return Err(Error::Config("domain dimension mismatch".into()));
        }
        self.domain = domain;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }
    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }
    pub fn action_dim(&self) -> usize {
        self.dynamics.action_dim()
    }
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
    /// `σσᵀ`.
    pub fn sigma_sq(&self) -> &DMatrix<f64> {
        &self.sigma_sq
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn action_box(&self) -> &BoxSet {
        &self.action_box
    }
    pub fn domain(&self) -> &BoxSet {
        &self.domain
    }
    pub fn structure(&self) -> &ControlStructure {
        &self.structure
    }
    pub fn is_noiseless(&self) -> bool {
        self.noiseless
    }

    /// Drift without clamping or finiteness checks. Hot path.
    #[inline]
    pub fn drift_into(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        self.dynamics.drift(x, a, out)
    }

    #[inline]
    pub fn cost(&self, x: &[f64], a: &[f64]) -> f64 {
        self.dynamics.cost(x, a)
    }

    /// Checked drift. Out-of-box actions are clamped with a warning.
    pub fn drift_eval(&self, x: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, a)?;
        let a = self.clamped(a);
        let mut out = vec![0.0; self.state_dim()];
        self.dynamics.drift(x, &a, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite drift at x={x:?}, a={a:?}"
            )));
        }
        Ok(out)
    }

    pub fn cost_eval(&self, x: &[f64], a: &[f64]) -> Result<f64> {
        self.check_dims(x, a)?;
        let c = self.dynamics.cost(x, a);
        if !c.is_finite() {
            return Err(Error::Numerical(format!("non-finite reward at x={x:?}, a={a:?}")));
        }
        Ok(c)
    }

    /// `∂b/∂a` at `(x, a)`, analytic when the model provides it.
    pub fn drift_action_jacobian(&self, x: &[f64], a: &[f64]) -> DMatrix<f64> {
        if let Some(g) = self.dynamics.control_matrix(x) {
            return g;
        }
        let (d, m) = (self.state_dim(), self.action_dim());
        let mut jac = DMatrix::zeros(d, m);
        let mut ap = a.to_vec();
        let mut am = a.to_vec();
        let mut bp = vec![0.0; d];
        let mut bm = vec![0.0; d];
        for j in 0..m {
            let h = 1e-6 * (1.0 + a[j].abs());
            ap[j] = a[j] + h;
            am[j] = a[j] - h;
            self.dynamics.drift(x, &ap, &mut bp);
            self.dynamics.drift(x, &am, &mut bm);
            for i in 0..d {
                jac[(i, j)] = (bp[i] - bm[i]) / (2.0 * h);
            }
            ap[j] = a[j];
            am[j] = a[j];
        }
        jac
    }

    /// Gradient in `a` of the greedy objective `L(x,a) + b(x,a)·z`.
    pub fn objective_action_gradient(&self, x: &[f64], a: &[f64], z: &[f64], out: &mut [f64]) {
        if let ControlStructure::AffineQuadratic { r, .. } = &self.structure {
            if let Some(g) = self.dynamics.control_matrix(x) {
                let m = a.len();
                for j in 0..m {
                    let mut s = 0.0;
                    for k in 0..m {
                        s += (r[(j, k)] + r[(k, j)]) * a[k];
                    }
                    let mut gz = 0.0;
                    for i in 0..z.len() {
                        gz += g[(i, j)] * z[i];
                    }
                    out[j] = gz - s;
                }
                return;
            }
        }
        let m = a.len();
        let mut ap = a.to_vec();
        for j in 0..m {
            let h = 1e-6 * (1.0 + a[j].abs());
            ap[j] = a[j] + h;
            let fp = self.greedy_objective(x, &ap, z);
            ap[j] = a[j] - h;
            let fm = self.greedy_objective(x, &ap, z);
            ap[j] = a[j];
            out[j] = (fp - fm) / (2.0 * h);
        }
    }

    /// `L(x,a) + b(x,a)·z`.
    pub fn greedy_objective(&self, x: &[f64], a: &[f64], z: &[f64]) -> f64 {
        let mut b = vec![0.0; self.state_dim()];
        self.dynamics.drift(x, a, &mut b);
        self.dynamics.cost(x, a) + b.iter().zip(z).map(|(bi, zi)| bi * zi).sum::<f64>()
    }

    /// `div_x b`, analytic or by central differences with `h = 1e-5 (1 + |x|)`.
    pub fn drift_divergence(&self, x: &[f64], a: &[f64]) -> f64 {
        if let Some(div) = self.dynamics.divergence(x, a) {
            return div;
        }
        let d = self.state_dim();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let h = 1e-5 * (1.0 + norm);
        let mut xp = x.to_vec();
        let mut bp = vec![0.0; d];
        let mut bm = vec![0.0; d];
        let mut div = 0.0;
        for i in 0..d {
            xp[i] = x[i] + h;
            self.dynamics.drift(&xp, a, &mut bp);
            xp[i] = x[i] - h;
            self.dynamics.drift(&xp, a, &mut bm);
            xp[i] = x[i];
            div += (bp[i] - bm[i]) / (2.0 * h);
        }
        div
    }

    fn check_dims(&self, x: &[f64], a: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() || a.len() != self.action_dim() {
            return Err(Error::Config(format!(
                "dimension mismatch: got x∈R^{} a∈R^{}, expected R^{} and R^{}",
                x.len(),
                a.len(),
                self.state_dim(),
                self.action_dim()
            )));
        }
        Ok(())
    }

    fn clamped(&self, a: &[f64]) -> Vec<f64> {
        let mut a = a.to_vec();
        if !self.action_box.contains(&a) {
            log::warn!("action {a:?} outside the action box; clamping");
            self.action_box.project(&mut a);
        }
        a
    }
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_range(s: &DMatrix<f64>) -> (f64, f64) {
    let eig = s.clone().symmetric_eigen();
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

// ---------------------------------------------------------------------------
// Catalog models
// ---------------------------------------------------------------------------

/// `b = Ax + Ba`, `L = -xᵀQx - aᵀRa`.
#[derive(Debug, Clone)]
pub struct Lqr {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl Lqr {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let d = a.nrows();
        let m = b.ncols();
        if a.ncols() != d || b.nrows() != d || q.shape() != (d, d) || r.shape() != (m, m) {
            return Err(Error::Config("inconsistent LQR matrix shapes".into()));
        }
        Ok(Self { a, b, q, r })
    }
}

impl Dynamics for Lqr {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn action_dim(&self) -> usize {
        self.b.ncols()
    }
    fn drift(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        let (d, m) = (self.a.nrows(), self.b.ncols());
        for i in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += self.a[(i, k)] * x[k];
            }
            for j in 0..m {
                s += self.b[(i, j)] * a[j];
            }
            out[i] = s;
        }
    }
    fn cost(&self, x: &[f64], a: &[f64]) -> f64 {
        -quad_form(&self.q, x) - quad_form(&self.r, a)
    }
    fn structure(&self) -> ControlStructure {
        ControlStructure::AffineQuadratic {
            r: self.r.clone(),
            r_diagonal: is_diagonal(&self.r),
        }
    }
    fn control_matrix(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.b.clone())
    }
    fn divergence(&self, _x: &[f64], _a: &[f64]) -> Option<f64> {
        Some(self.a.trace())
    }
}

fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += v[i] * m[(i, j)] * v[j];
        }
    }
    s
}

/// Wrap an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// Torque-driven pendulum, `θ = 0` upright.
/// `θ̇ = ω`, `ω̇ = (3g/2l) sin θ + 3/(ml²) a`, `L = -(θ² + 0.1ω² + 0.001a²)`.
#[derive(Debug, Clone)]
pub struct Pendulum {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
        }
    }
}

impl Pendulum {
    fn torque_gain(&self) -> f64 {
        3.0 / (self.mass * self.length * self.length)
    }
}

impl Dynamics for Pendulum {
    fn state_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = 1.5 * self.gravity / self.length * x[0].sin() + self.torque_gain() * a[0];
    }
    fn cost(&self, x: &[f64], a: &[f64]) -> f64 {
        let th = wrap_angle(x[0]);
        -(th * th + 0.1 * x[1] * x[1] + 0.001 * a[0] * a[0])
    }
    fn structure(&self) -> ControlStructure {
        ControlStructure::AffineQuadratic {
            r: DMatrix::from_element(1, 1, 0.001),
            r_diagonal: true,
        }
    }
    fn control_matrix(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_column_slice(2, 1, &[0.0, self.torque_gain()]))
    }
    fn divergence(&self, _x: &[f64], _a: &[f64]) -> Option<f64> {
        Some(0.0)
    }
    fn canonicalize(&self, x: &mut [f64]) {
        x[0] = wrap_angle(x[0]);
    }
}

/// Continuous-force cart-pole in the Barto–Sutton form. State
/// `(x, ẋ, θ, θ̇)` with `θ = 0` upright.
/// `L = -(x² + 10θ² + 0.1ẋ² + 0.1θ̇² + 0.001F²)`.
#[derive(Debug, Clone)]
pub struct Cartpole {
    pub gravity: f64,
    pub mass_cart: f64,
    pub mass_pole: f64,
    /// Half the pole length.
    pub half_length: f64,
}

impl Default for Cartpole {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            mass_cart: 1.0,
            mass_pole: 0.1,
            half_length: 0.5,
        }
    }
}

impl Cartpole {
    /// Returns `(ẍ, θ̈)` and their derivatives with respect to the force.
    fn accelerations(&self, x: &[f64], force: f64) -> (f64, f64, f64, f64) {
        let total = self.mass_cart + self.mass_pole;
        let pml = self.mass_pole * self.half_length;
        let (sin, cos) = x[2].sin_cos();
        let temp = (force + pml * x[3] * x[3] * sin) / total;
        let denom = self.half_length * (4.0 / 3.0 - self.mass_pole * cos * cos / total);
        let theta_acc = (self.gravity * sin - cos * temp) / denom;
        let x_acc = temp - pml * theta_acc * cos / total;
        let dtheta = -cos / (total * denom);
        let dx = 1.0 / total - pml * cos * dtheta / total;
        (x_acc, theta_acc, dx, dtheta)
    }
}

impl Dynamics for Cartpole {
    fn state_dim(&self) -> usize {
        4
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        let (x_acc, theta_acc, _, _) = self.accelerations(x, a[0]);
        out[0] = x[1];
        out[1] = x_acc;
        out[2] = x[3];
        out[3] = theta_acc;
    }
    fn cost(&self, x: &[f64], a: &[f64]) -> f64 {
        -(x[0] * x[0]
            + 10.0 * x[2] * x[2]
            + 0.1 * x[1] * x[1]
            + 0.1 * x[3] * x[3]
            + 0.001 * a[0] * a[0])
    }
    fn structure(&self) -> ControlStructure {
        ControlStructure::AffineQuadratic {
            r: DMatrix::from_element(1, 1, 0.001),
            r_diagonal: true,
        }
    }
    fn control_matrix(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let (_, _, dx, dtheta) = self.accelerations(x, 0.0);
        Some(DMatrix::from_column_slice(4, 1, &[0.0, dx, 0.0, dtheta]))
    }
}

/// `L ≡ c`, `b = -rate·x`. The value function is `c/λ` for every policy.
#[derive(Debug, Clone)]
pub struct ConstantReward {
    pub c: f64,
    pub dim: usize,
    pub drift_rate: f64,
}

impl Dynamics for ConstantReward {
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], _a: &[f64], out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = -self.drift_rate * xi;
        }
    }
    fn cost(&self, _x: &[f64], _a: &[f64]) -> f64 {
        self.c
    }
    fn structure(&self) -> ControlStructure {
        ControlStructure::ActionIndependent
    }
    fn control_matrix(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(self.dim, 1))
    }
    fn divergence(&self, _x: &[f64], _a: &[f64]) -> Option<f64> {
        Some(-self.drift_rate * self.dim as f64)
    }
}

type DriftFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;
type CostFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// Problem given by closures; general control structure.
pub struct FnDynamics {
    state_dim: usize,
    action_dim: usize,
    drift: Box<DriftFn>,
    cost: Box<CostFn>,
}

impl FnDynamics {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        drift: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        cost: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            state_dim,
            action_dim,
            drift: Box::new(drift),
            cost: Box::new(cost),
        }
    }
}

impl fmt::Debug for FnDynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnDynamics")
            .field("state_dim", &self.state_dim)
            .field("action_dim", &self.action_dim)
            .finish_non_exhaustive()
    }
}

impl Dynamics for FnDynamics {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn action_dim(&self) -> usize {
        self.action_dim
    }
    fn drift(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        (self.drift)(x, a, out)
    }
    fn cost(&self, x: &[f64], a: &[f64]) -> f64 {
        (self.cost)(x, a)
    }
}

// ---------------------------------------------------------------------------
// Catalog constructors
// ---------------------------------------------------------------------------

/// Random constrained LQR. `A` is shifted so every eigenvalue has real part
/// at most `-0.1`; `Q` and `R` are `GᵀG + 0.1 I` with Gaussian factors.
pub fn make_lqr(
    d: usize,
    m: usize,
    seed: u64,
    u_max: f64,
    sigma_scale: f64,
    lambda: f64,
) -> Result<ControlProblem> {
    if d == 0 || m == 0 {
        return Err(Error::Config("LQR dimensions must be positive".into()));
    }
    let lqr = random_lqr_matrices(d, m, seed);
    lqr_problem(
        format!("lqr{d}d"),
        lqr,
        sigma_scale,
        lambda,
        u_max,
        BoxSet::symmetric(d, 3.0),
    )
}

pub fn random_lqr_matrices(d: usize, m: usize, seed: u64) -> Lqr {
    let mut rng = seeded_rng(seed, 0x1a2);
    let mut gauss = |r: usize, c: usize, scale: f64| {
        DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
    };
    let mut a = gauss(d, d, 1.0 / (d as f64).sqrt());
    let b = gauss(d, m, 1.0);
    let gq = gauss(d, d, 1.0 / (d as f64).sqrt());
    let gr = gauss(m, m, 1.0 / (m as f64).sqrt());
    let max_re = a
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_re > -0.1 {
        let shift = max_re + 0.1;
        for i in 0..d {
            a[(i, i)] -= shift;
        }
    }
    let q = gq.transpose() * &gq + DMatrix::identity(d, d) * 0.1;
    let r = gr.transpose() * &gr + DMatrix::identity(m, m) * 0.1;
    Lqr { a, b, q, r }
}

pub fn lqr_problem(
    name: impl Into<String>,
    lqr: Lqr,
    sigma_scale: f64,
    lambda: f64,
    u_max: f64,
    domain: BoxSet,
) -> Result<ControlProblem> {
    let d = lqr.a.nrows();
    let m = lqr.b.ncols();
    ControlProblem::new(
        name,
        Arc::new(lqr),
        DMatrix::identity(d, d) * sigma_scale,
        lambda,
        BoxSet::symmetric(m, u_max),
        domain,
    )
}

/// Scalar LQR `dX = (aX + bU)dt + σ dW`, `L = -qx² - ru²`, `|u| ≤ u_max`,
/// on `[-half_width, half_width]`.
#[allow(clippy::too_many_arguments)]
pub fn make_scalar_lqr(
    a: f64,
    b: f64,
    q: f64,
    r: f64,
    u_max: f64,
    sigma: f64,
    lambda: f64,
    half_width: f64,
) -> Result<ControlProblem> {
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    lqr_problem(
        "lqr1d",
        Lqr::new(one(a), one(b), one(q), one(r))?,
        sigma,
        lambda,
        u_max,
        BoxSet::symmetric(1, half_width),
    )
}

pub fn make_pendulum() -> Result<ControlProblem> {
    make_pendulum_with(0.1, 1.0)
}

pub fn make_pendulum_with(sigma_scale: f64, lambda: f64) -> Result<ControlProblem> {
    ControlProblem::new(
        "pendulum",
        Arc::new(Pendulum::default()),
        DMatrix::identity(2, 2) * sigma_scale,
        lambda,
        BoxSet::symmetric(1, 2.0),
        BoxSet::new(vec![-PI, -8.0], vec![PI, 8.0])?,
    )
}

pub fn make_cartpole() -> Result<ControlProblem> {
    make_cartpole_with(0.1, 1.0)
}

pub fn make_cartpole_with(sigma_scale: f64, lambda: f64) -> Result<ControlProblem> {
    ControlProblem::new(
        "cartpole",
        Arc::new(Cartpole::default()),
        DMatrix::identity(4, 4) * sigma_scale,
        lambda,
        BoxSet::symmetric(1, 10.0),
        BoxSet::new(vec![-2.4, -3.0, -0.21, -3.0], vec![2.4, 3.0, 0.21, 3.0])?,
    )
}

/// Constant reward `c` with zero drift, `σ = 0.1 I`, on `[-1, 1]^d`.
pub fn make_constant_cost(c: f64, lambda: f64, d: usize) -> Result<ControlProblem> {
    make_constant_cost_with(c, lambda, d, 0.0, 0.1, BoxSet::symmetric(d, 1.0))
}

pub fn make_constant_cost_with(
    c: f64,
    lambda: f64,
    d: usize,
    drift_rate: f64,
    sigma_scale: f64,
    domain: BoxSet,
) -> Result<ControlProblem> {
    ControlProblem::new(
        "constant",
        Arc::new(ConstantReward {
            c,
            dim: d,
            drift_rate,
        }),
        DMatrix::identity(d, d) * sigma_scale,
        lambda,
        BoxSet::symmetric(1, 1.0),
        domain,
    )
}

// ---------------------------------------------------------------------------
// Config-facing problem description
// ---------------------------------------------------------------------------

fn default_u_max() -> f64 {
    10.0
}
fn default_sigma() -> f64 {
    0.1
}
fn default_lambda() -> f64 {
    1.0
}
fn default_half_width() -> f64 {
    3.0
}
fn default_one() -> f64 {
    1.0
}

/// Catalog entry addressable from a config file, `name = "..."` selects the variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Lqr {
        d: usize,
        #[serde(default)]
        m: Option<usize>,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default = "default_u_max")]
        u_max: f64,
        #[serde(default = "default_sigma")]
        sigma_scale: f64,
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    ScalarLqr {
        #[serde(default)]
        a: f64,
        #[serde(default = "default_one")]
        b: f64,
        #[serde(default = "default_one")]
        q: f64,
        #[serde(default = "default_one")]
        r: f64,
        #[serde(default = "default_u_max")]
        u_max: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_half_width")]
        half_width: f64,
    },
    Pendulum {
        #[serde(default = "default_sigma")]
        sigma_scale: f64,
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Cartpole {
        #[serde(default = "default_sigma")]
        sigma_scale: f64,
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Constant {
        #[serde(default = "default_one")]
        c: f64,
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_dim")]
        d: usize,
        #[serde(default)]
        drift_rate: f64,
        #[serde(default = "default_sigma")]
        sigma_scale: f64,
        #[serde(default = "default_one")]
        half_width: f64,
    },
}

fn default_dim() -> usize {
    2
}

impl ProblemSpec {
    /// Build the problem. `fallback_seed` is used when a random family has no
    /// explicit seed.
    pub fn build(&self, fallback_seed: u64) -> Result<ControlProblem> {
        match *self {
            ProblemSpec::Lqr {
                d,
                m,
                seed,
                u_max,
                sigma_scale,
                lambda,
            } => make_lqr(
                d,
                m.unwrap_or(d),
                seed.unwrap_or(fallback_seed),
                u_max,
                sigma_scale,
                lambda,
            ),
            ProblemSpec::ScalarLqr {
                a,
                b,
                q,
                r,
                u_max,
                sigma,
                lambda,
                half_width,
            } => make_scalar_lqr(a, b, q, r, u_max, sigma, lambda, half_width),
            ProblemSpec::Pendulum {
                sigma_scale,
                lambda,
            } => make_pendulum_with(sigma_scale, lambda),
            ProblemSpec::Cartpole {
                sigma_scale,
                lambda,
            } => make_cartpole_with(sigma_scale, lambda),
            ProblemSpec::Constant {
                c,
                lambda,
                d,
                drift_rate,
                sigma_scale,
                half_width,
            } => make_constant_cost_with(
                c,
                lambda,
                d,
                drift_rate,
                sigma_scale,
                BoxSet::symmetric(d, half_width),
            ),
        }
    }

    /// LQR matrices when the problem belongs to the LQR family.
    pub fn lqr_matrices(&self, fallback_seed: u64) -> Option<Lqr> {
        match *self {
            ProblemSpec::Lqr { d, m, seed, .. } => Some(random_lqr_matrices(
                d,
                m.unwrap_or(d),
                seed.unwrap_or(fallback_seed),
            )),
            ProblemSpec::ScalarLqr { a, b, q, r, .. } => {
                let one = |v: f64| DMatrix::from_element(1, 1, v);
                Some(Lqr {
                    a: one(a),
                    b: one(b),
                    q: one(q),
                    r: one(r),
                })
            }
            _ => None,
        }
    }

    /// Exact value when the problem is the constant-reward fixture.
    pub fn analytic_value(&self) -> Option<f64> {
        match *self {
            ProblemSpec::Constant { c, lambda, .. } => Some(c / lambda),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Assumption diagnostics
// ---------------------------------------------------------------------------

/// Empirical versions of the constants entering the stability and
/// contraction estimates, measured on `Ω × A`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryConstants {
    /// Sampled sup of `|b| + |div_x b|`.
    pub b_hat: f64,
    pub nu: f64,
    pub lambda_max: f64,
    /// Strong-concavity modulus of `a ↦ L(x,a)`.
    pub mu_a: f64,
    /// Sampled sup of `|∇_a L|`.
    pub l_a: f64,
    /// Sampled bound on `|∂_a b| + Lip_a(∂_a b)`.
    pub b_tilde: f64,
    /// `λ - B̂/2`.
    pub lambda_margin: f64,
    /// `None` when `lambda_margin ≤ 0`.
    pub c_lambda: Option<f64>,
    /// Value-gradient bound `M` used for the selector constant.
    pub grad_bound: f64,
    /// Selector Lipschitz constant `B̃/(μ_a - B̃M)`, `None` when `μ_a ≤ B̃M`.
    pub theta: Option<f64>,
    pub c_r: Option<f64>,
    /// `sqrt(C_R² / (ν (λ - B̂/2)))`.
    pub kappa_tilde_bound: Option<f64>,
}

impl TheoryConstants {
    /// `max{1/(λ - B/2), sqrt(1/(ν(λ - B/2)))}`, or `None` when `λ ≤ B/2`.
    pub fn c_lambda_formula(lambda: f64, b: f64, nu: f64) -> Option<f64> {
        let margin = lambda - 0.5 * b;
        (margin > 0.0 && nu > 0.0).then(|| (1.0 / margin).max((1.0 / (nu * margin)).sqrt()))
    }

    /// Recompute the selector and contraction constants for a value-gradient bound `M`.
    pub fn with_gradient_bound(mut self, grad_bound: f64) -> Self {
        self.grad_bound = grad_bound;
        let denom = self.mu_a - self.b_tilde * grad_bound;
        self.theta = (denom > 0.0).then(|| self.b_tilde / denom);
        self.c_r = self
            .theta
            .map(|t| t * (self.l_a + self.b_tilde * grad_bound));
        self.kappa_tilde_bound = match (self.c_r, self.lambda_margin > 0.0) {
            (Some(cr), true) => Some((cr * cr / (self.nu * self.lambda_margin)).sqrt()),
            _ => None,
        };
        self
    }

    pub fn a2_holds(&self) -> bool {
        self.lambda_margin > 0.0
    }
}

/// Measure the assumption constants of `problem` from `n_samples` uniform
/// draws of `(x, a) ∈ Ω × A`.
pub fn validate_assumptions(
    problem: &ControlProblem,
    n_samples: usize,
    seed: u64,
) -> Result<TheoryConstants> {
    if n_samples < 1000 {
        return Err(Error::Config(format!(
            "validate_assumptions needs at least 1000 samples, got {n_samples}"
        )));
    }
    let (nu, lambda_max) = eigen_range(problem.sigma_sq());
    if problem.is_noiseless() || nu <= 0.0 {
        return Err(Error::Assumption(format!(
            "σσᵀ is degenerate (smallest eigenvalue {nu:e}); uniform ellipticity fails"
        )));
    }
    let d = problem.state_dim();
    let m = problem.action_dim();
    let mut rng = seeded_rng(seed, 0x7a1);
    let xs = problem.domain().sample_uniform(n_samples, &mut rng);
    let as_ = problem.action_box().sample_uniform(n_samples, &mut rng);
    let as2 = problem.action_box().sample_uniform(n_samples, &mut rng);

    let mut b_hat: f64 = 0.0;
    let mut l_a: f64 = 0.0;
    let mut b_tilde: f64 = 0.0;
    let mut mu_sampled = f64::INFINITY;
    let mut b = vec![0.0; d];
    let mut grad = vec![0.0; m];
    let zero_z = vec![0.0; d];
    let general = matches!(problem.structure(), ControlStructure::General);

    for i in 0..n_samples {
        let x = &xs[i * d..(i + 1) * d];
        let a = &as_[i * m..(i + 1) * m];
        problem.drift_into(x, a, &mut b);
        let norm_b = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let div = problem.drift_divergence(x, a);
        b_hat = b_hat.max(norm_b + div.abs());

        problem.objective_action_gradient(x, a, &zero_z, &mut grad);
        l_a = l_a.max(grad.iter().map(|v| v * v).sum::<f64>().sqrt());

        let jac = problem.drift_action_jacobian(x, a);
        let mut bt = jac.norm().min(operator_norm(&jac));
        if general {
            let a2 = &as2[i * m..(i + 1) * m];
            let jac2 = problem.drift_action_jacobian(x, a2);
            let da = a.iter().zip(a2).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            if da > 1e-9 {
                bt += operator_norm(&(&jac - &jac2)) / da;
            }
            mu_sampled = mu_sampled.min(sampled_concavity(problem, x, a));
        }
        b_tilde = b_tilde.max(bt);
    }
    if !b_hat.is_finite() {
        return Err(Error::Numerical("drift bound is not finite on the domain".into()));
    }

    let mu_a = match problem.structure() {
        ControlStructure::AffineQuadratic { r, .. } => {
            2.0 * eigen_range(&(0.5 * (r + r.transpose()))).0
        }
        ControlStructure::ActionIndependent => 0.0,
        ControlStructure::General => mu_sampled.max(0.0),
    };

    let lambda = problem.lambda();
    let lambda_margin = lambda - 0.5 * b_hat;
    if lambda_margin <= 0.0 {
        log::warn!(
            "λ = {lambda} ≤ B̂/2 = {} on the training domain: the L² stability estimate does not apply",
            0.5 * b_hat
        );
    }
    let out = TheoryConstants {
        b_hat,
        nu,
        lambda_max,
        mu_a,
        l_a,
        b_tilde,
        lambda_margin,
        c_lambda: TheoryConstants::c_lambda_formula(lambda, b_hat, nu),
        grad_bound: 0.0,
        theta: None,
        c_r: None,
        kappa_tilde_bound: None,
    };
    Ok(out.with_gradient_bound(0.0))
}

pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Smallest eigenvalue of `-∇²_a L(x, ·)` at `a`, by central second differences.
fn sampled_concavity(problem: &ControlProblem, x: &[f64], a: &[f64]) -> f64 {
    let m = a.len();
    let h = 1e-4;
    let f = |ap: &[f64]| problem.cost(x, ap);
    let mut hess = DMatrix::zeros(m, m);
    let mut ap = a.to_vec();
    let f0 = f(a);
    for i in 0..m {
        for j in i..m {
            let val = if i == j {
                ap[i] = a[i] + h;
                let fp = f(&ap);
                ap[i] = a[i] - h;
                let fm = f(&ap);
                ap[i] = a[i];
                (fp - 2.0 * f0 + fm) / (h * h)
            } else {
                let mut g = 0.0;
                for (si, sj, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                    ap[i] = a[i] + si * h;
                    ap[j] = a[j] + sj * h;
                    g += w * f(&ap);
                }
                ap[i] = a[i];
                ap[j] = a[j];
                g / (4.0 * h * h)
            };
            hess[(i, j)] = -val;
            hess[(j, i)] = -val;
        }
    }
    eigen_range(&hess).0
}

/// `G(x)` and `R` of an affine-quadratic problem, or a structure error.
pub fn affine_quadratic_parts(
    problem: &ControlProblem,
    x: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>, bool)> {
    match problem.structure() {
        ControlStructure::AffineQuadratic { r, r_diagonal } => {
            let g = problem
                .dynamics()
                .control_matrix(x)
                .ok_or_else(|| Error::Structure("model does not expose G(x)".into()))?;
            Ok((g, r.clone(), *r_diagonal))
        }
        other => Err(Error::Structure(format!(
            "problem `{}` has {other:?} structure",
            problem.name()
        ))),
    }
}
