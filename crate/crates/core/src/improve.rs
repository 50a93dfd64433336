//! Policy improvement: `a(x) = argmax_{a ∈ A} L(x,a) + b(x,a)·∇v(x)`.
//!
//! Affine-quadratic problems with diagonal `R` use the clamped closed form.
//! Everything else runs projected gradient ascent with Barzilai–Borwein steps
//! and an Armijo guard; for affine-quadratic problems the ascent result is
//! then polished by solving the KKT system on the detected active face.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::{load_checkpoint, Outputs, ValueNet, CHUNK};
use crate::problems::{affine_quadratic_parts, operator_norm, ControlProblem, ControlStructure};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutcome {
    pub action: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

type ActionFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
enum Kind {
    Explicit(Arc<ActionFn>),
    Greedy { net: Arc<ValueNet>, cfg: GreedyConfig },
}

/// A feedback policy `x ↦ a`. Outputs are always projected onto the action box.
#[derive(Clone)]
pub struct PolicyHandle {
    label: String,
    kind: Kind,
}

impl fmt::Debug for PolicyHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PolicyHandle").field("label", &self.label).finish()
    }
}

impl PolicyHandle {
    pub fn explicit(label: impl Into<String>, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self {
            label: label.into(),
            kind: Kind::Explicit(Arc::new(f)),
        }
    }

    pub fn constant(action: Vec<f64>) -> Self {
        Self::explicit(format!("constant {action:?}"), move |_, out| out.copy_from_slice(&action))
    }

    /// The center of the action box, used as the initial policy.
    pub fn box_center(problem: &ControlProblem) -> Self {
        let mut h = Self::constant(problem.action_box().center());
        h.label = "box center".into();
        h
    }

    pub fn greedy(net: Arc<ValueNet>, cfg: GreedyConfig) -> Self {
        Self {
            label: "greedy".into(),
            kind: Kind::Greedy { net, cfg },
        }
    }

    /// Greedy policy of a checkpointed net on the problem it references.
    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<(Self, ControlProblem)> {
        let ck = load_checkpoint(path)?;
        let pref = ck
            .problem
            .ok_or_else(|| Error::Format("checkpoint carries no problem reference".into()))?;
        let problem = pref.build()?;
        if problem.state_dim() != ck.net.input_dim() {
            return Err(Error::Format(format!(
                "network input dimension {} does not match problem dimension {}",
                ck.net.input_dim(),
                problem.state_dim()
            )));
        }
        Ok((Self::greedy(Arc::new(ck.net), GreedyConfig::default()), problem))
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn net(&self) -> Option<&Arc<ValueNet>> {
        match &self.kind {
            Kind::Greedy { net, .. } => Some(net),
            Kind::Explicit(_) => None,
        }
    }

    /// Action at one state.
    pub fn act(&self, problem: &ControlProblem, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            Kind::Explicit(f) => f(x, out),
            Kind::Greedy { net, cfg } => {
                let e = net.eval_batch(x, None, Outputs::Gradient);
                out.copy_from_slice(&greedy_action(problem, x, &e.grads, cfg).action);
            }
        }
        problem.action_box().project(out);
    }

    /// Actions at row-major `points`, returned row-major `N × m`.
    pub fn act_batch(&self, problem: &ControlProblem, points: &[f64]) -> Vec<f64> {
        let d = problem.state_dim();
        let m = problem.action_dim();
        let n = points.len() / d;
        let mut out = vec![0.0; n * m];
        match &self.kind {
            Kind::Explicit(f) => {
                for (x, a) in points.chunks_exact(d).zip(out.chunks_exact_mut(m)) {
                    f(x, a);
                    problem.action_box().project(a);
                }
            }
            Kind::Greedy { net, cfg } => {
                let grads = net.eval_batch(points, None, Outputs::Gradient).grads;
                out.par_chunks_mut(CHUNK * m)
                    .enumerate()
                    .for_each(|(c, block)| {
                        for (k, a) in block.chunks_exact_mut(m).enumerate() {
                            let i = c * CHUNK + k;
                            let x = &points[i * d..(i + 1) * d];
                            let z = &grads[i * d..(i + 1) * d];
                            a.copy_from_slice(&greedy_action(problem, x, z, cfg).action);
                            problem.action_box().project(a);
                        }
                    });
            }
        }
        out
    }
}

/// Maximizer of `L(x,a) + b(x,a)·z` over the action box, dispatched on the
/// control structure.
pub fn greedy_action(problem: &ControlProblem, x: &[f64], z: &[f64], cfg: &GreedyConfig) -> GreedyOutcome {
    match problem.structure() {
        ControlStructure::ActionIndependent => GreedyOutcome {
            action: problem.action_box().center(),
            converged: true,
            iterations: 0,
        },
        ControlStructure::AffineQuadratic { r_diagonal: true, .. } => GreedyOutcome {
            action: greedy_action_closed_form(problem, x, z).expect("affine-quadratic structure"),
            converged: true,
            iterations: 0,
        },
        _ => greedy_action_projected(problem, x, z, cfg),
    }
}

/// `clamp(½ R⁻¹ G(x)ᵀ z)`; exact for diagonal `R` because the objective
/// separates per coordinate.
pub fn greedy_action_closed_form(problem: &ControlProblem, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let (g, r, diagonal) = affine_quadratic_parts(problem, x)?;
    if !diagonal {
        return Err(Error::Structure(
            "closed-form greedy action needs a diagonal R".into(),
        ));
    }
    let bx = problem.action_box();
    Ok((0..g.ncols())
        .map(|j| {
            let gz: f64 = (0..g.nrows()).map(|i| g[(i, j)] * z[i]).sum();
            (0.5 * gz / r[(j, j)]).clamp(bx.lo[j], bx.hi[j])
        })
        .collect())
}

/// Projected gradient ascent on `a ↦ L(x,a) + b(x,a)·z` started at the box
/// center. Stops when the projected-gradient norm drops below `cfg.tol`; on
/// exhaustion of `cfg.max_iter` the best iterate is returned with
/// `converged = false`.
pub fn greedy_action_projected(problem: &ControlProblem, x: &[f64], z: &[f64], cfg: &GreedyConfig) -> GreedyOutcome {
    let bx = problem.action_box();
    let m = problem.action_dim();
    let f = |a: &[f64]| problem.greedy_objective(x, a, z);
    let grad = |a: &[f64], out: &mut [f64]| problem.objective_action_gradient(x, a, z, out);
    let pg_norm = |a: &[f64], g: &[f64]| -> f64 {
        (0..m)
            .map(|j| {
                let p = (a[j] + g[j]).clamp(bx.lo[j], bx.hi[j]) - a[j];
                p * p
            })
            .sum::<f64>()
            .sqrt()
    };

    let mut a = bx.center();
    let mut g = vec![0.0; m];
    grad(&a, &mut g);
    let mut fa = f(&a);

    let mut step = initial_step(problem, x, z, &a, &g);
    let mut trial = vec![0.0; m];
    let mut g_new = vec![0.0; m];
    let mut converged = pg_norm(&a, &g) < cfg.tol;
    let mut iterations = 0;
    while !converged && iterations < cfg.max_iter {
        iterations += 1;
        // Armijo backtracking along the projected arc
        let mut accepted = false;
        for _ in 0..40 {
            for j in 0..m {
                trial[j] = (a[j] + step * g[j]).clamp(bx.lo[j], bx.hi[j]);
            }
            let ft = f(&trial);
            let dir: f64 = (0..m).map(|j| g[j] * (trial[j] - a[j])).sum();
            if ft >= fa + 1e-4 * dir {
                accepted = ft >= fa;
                if accepted {
                    grad(&trial, &mut g_new);
                    let (mut ss, mut sy) = (0.0, 0.0);
                    for j in 0..m {
                        let s = trial[j] - a[j];
                        let y = g_new[j] - g[j];
                        ss += s * s;
                        sy -= s * y;
                    }
                    a.copy_from_slice(&trial);
                    g.copy_from_slice(&g_new);
                    fa = ft;
                    // Barzilai–Borwein step for a concave objective
                    step = if sy > 1e-300 { (ss / sy).clamp(1e-12, 1e12) } else { step * 2.0 };
                }
                break;
            }
            step *= 0.5;
        }
        converged = pg_norm(&a, &g) < cfg.tol;
        if !accepted && !converged {
            break;
        }
    }

    if matches!(problem.structure(), ControlStructure::AffineQuadratic { .. }) {
        if let Some(polished) = polish_affine_quadratic(problem, x, z, &a) {
            let fp = f(&polished);
            if fp >= fa {
                return GreedyOutcome {
                    action: polished,
                    converged: true,
                    iterations,
                };
            }
        }
    }
    if !converged {
        log::debug!("projected ascent stopped after {iterations} iterations without meeting tol");
    }
    GreedyOutcome {
        action: a,
        converged,
        iterations,
    }
}

/// `1 / (μ + smoothness)` from a secant probe of the gradient.
fn initial_step(problem: &ControlProblem, x: &[f64], z: &[f64], a: &[f64], g: &[f64]) -> f64 {
    if let ControlStructure::AffineQuadratic { r, .. } = problem.structure() {
        let sym = (r + r.transpose()) * 0.5;
        let (_, hi) = crate::problems::eigen_range(&sym);
        return 1.0 / (2.0 * hi);
    }
    let m = a.len();
    let bx = problem.action_box();
    let scale: f64 = (0..m).map(|j| bx.hi[j] - bx.lo[j]).fold(0.0, f64::max);
    let h = 1e-3 * scale;
    let mut ap = a.to_vec();
    let mut gp = vec![0.0; m];
    ap[0] += h;
    problem.objective_action_gradient(x, &ap, z, &mut gp);
    let lip = gp.iter().zip(g).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt() / h;
    if lip > 1e-12 {
        1.0 / lip
    } else {
        scale
    }
}

/// Exact maximizer on the face of the box selected by `a`: coordinates at a
/// bound whose gradient points outward stay fixed, the rest solve the
/// reduced linear system. Returns `None` when the result violates the KKT
/// conditions.
fn polish_affine_quadratic(problem: &ControlProblem, x: &[f64], z: &[f64], a: &[f64]) -> Option<Vec<f64>> {
    let (g, r, _) = affine_quadratic_parts(problem, x).ok()?;
    let bx = problem.action_box();
    let m = a.len();
    let rs = (&r + r.transpose()) * 0.5;
    let gz = g.transpose() * DVector::from_column_slice(z);
    // gradient = Gᵀz - 2 R_s a
    let grad_at = |v: &[f64]| -> DVector<f64> { &gz - &rs * DVector::from_column_slice(v) * 2.0 };
    let gr = grad_at(a);
    let tol = 1e-10 * (1.0 + gz.amax());
    let fixed: Vec<bool> = (0..m)
        .map(|j| (a[j] <= bx.lo[j] && gr[j] <= tol) || (a[j] >= bx.hi[j] && gr[j] >= -tol))
        .collect();
    let free: Vec<usize> = (0..m).filter(|&j| !fixed[j]).collect();
    let mut out = a.to_vec();
    if !free.is_empty() {
        // 2 R_ff a_f = (Gᵀz)_f - 2 R_fc a_c
        let k = free.len();
        let mut lhs = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for (p, &i) in free.iter().enumerate() {
            rhs[p] = gz[i];
            for j in 0..m {
                if fixed[j] {
                    rhs[p] -= 2.0 * rs[(i, j)] * a[j];
                }
            }
            for (q, &j) in free.iter().enumerate() {
                lhs[(p, q)] = 2.0 * rs[(i, j)];
            }
        }
        let sol = lhs.cholesky()?.solve(&rhs);
        for (p, &i) in free.iter().enumerate() {
            if sol[p] < bx.lo[i] || sol[p] > bx.hi[i] {
                return None;
            }
            out[i] = sol[p];
        }
    }
    let gr = grad_at(&out);
    for j in 0..m {
        let ok = if out[j] <= bx.lo[j] {
            gr[j] <= tol
        } else if out[j] >= bx.hi[j] {
            gr[j] >= -tol
        } else {
            gr[j].abs() <= tol.max(1e-8)
        };
        if !ok {
            return None;
        }
    }
    Some(out)
}

/// `max_i ‖p1(x_i) - p2(x_i)‖_∞` over row-major probe points.
pub fn policy_sup_distance(problem: &ControlProblem, p1: &PolicyHandle, p2: &PolicyHandle, probe_points: &[f64]) -> Result<f64> {
    if probe_points.is_empty() {
        return Err(Error::Config("policy distance needs at least one probe point".into()));
    }
    let a1 = p1.act_batch(problem, probe_points);
    let a2 = p2.act_batch(problem, probe_points);
    Ok(sup_distance(&a1, &a2))
}

pub(crate) fn sup_distance(a1: &[f64], a2: &[f64]) -> f64 {
    a1.iter().zip(a2).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

/// `max |a*(x,z) - a*(x,z')| / |z - z'|` over the given pairs (Euclidean norms).
pub fn selector_lipschitz_probe(problem: &ControlProblem, x: &[f64], z_pairs: &[(Vec<f64>, Vec<f64>)], cfg: &GreedyConfig) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (z1, z2) in z_pairs {
        let dz = z1.iter().zip(z2).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        if dz == 0.0 {
            return Err(Error::Config("selector probe needs z ≠ z′".into()));
        }
        let a1 = greedy_action(problem, x, z1, cfg).action;
        let a2 = greedy_action(problem, x, z2, cfg).action;
        let da = a1.iter().zip(&a2).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(da / dz);
    }
    Ok(worst)
}

/// `‖½ R⁻¹ G(x)ᵀ‖₂`: the Lipschitz constant of the selector for affine
/// drifts with diagonal `R`.
pub fn affine_selector_bound(problem: &ControlProblem, x: &[f64]) -> Result<f64> {
    let (g, r, _) = affine_quadratic_parts(problem, x)?;
    let rinv = r
        .try_inverse()
        .ok_or_else(|| Error::Numerical("R is singular".into()))?;
    Ok(operator_norm(&(rinv * g.transpose() * 0.5)))
}

/// Greedy-objective values at `points` for actions `actions`, against the
/// value gradients of `net`.
pub fn greedy_objectives(problem: &ControlProblem, net: &ValueNet, points: &[f64], actions: &[f64]) -> Vec<f64> {
    let d = problem.state_dim();
    let m = problem.action_dim();
    let grads = net.eval_batch(points, None, Outputs::Gradient).grads;
    (0..points.len() / d)
        .map(|i| {
            problem.greedy_objective(
                &points[i * d..(i + 1) * d],
                &actions[i * m..(i + 1) * m],
                &grads[i * d..(i + 1) * d],
            )
        })
        .collect()
}
