//! Finite-difference Howard policy iteration on 1D/2D tensor grids.
//!
//! The frozen-policy equation `λv - ½ tr(S ∇²v) - b·∇v = L` is discretized with
//! centered diffusion and first-order upwind advection. At the box boundary a
//! linearly extrapolated ghost node removes the normal second difference;
//! inward advection uses the one-sided difference and outward advection is
//! dropped, which keeps the operator a strictly diagonally dominant M-matrix.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::linsolve::{solve, StencilMatrix};
use crate::domain::BoxSet;
use crate::error::{Error, Result};
use crate::improve::{greedy_action, GreedyConfig, PolicyHandle};
use crate::problems::ControlProblem;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub nodes: Vec<usize>,
    pub bounds: BoxSet,
}

impl GridSpec {
    pub fn new(nodes: Vec<usize>, bounds: BoxSet) -> Result<Self> {
        if nodes.len() != bounds.dim() || nodes.is_empty() || nodes.len() > 2 {
            return Err(Error::Oracle(format!(
                "grid solver supports 1 or 2 dimensions, got {}",
                bounds.dim()
            )));
        }
        if nodes.iter().any(|&n| n < 3) {
            return Err(Error::Oracle("each grid axis needs at least 3 nodes".into()));
        }
        Ok(Self { nodes, bounds })
    }

    /// `nodes` per axis on Ω enlarged by `margin` about its center.
    pub fn around(problem: &ControlProblem, nodes: usize, margin: f64) -> Result<Self> {
        let d = problem.state_dim();
        Self::new(vec![nodes; d], problem.domain().scaled(margin))
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }
    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn spacing(&self, axis: usize) -> f64 {
        (self.bounds.hi[axis] - self.bounds.lo[axis]) / (self.nodes[axis] - 1) as f64
    }
    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dim()];
        for k in 1..self.dim() {
            s[k] = s[k - 1] * self.nodes[k - 1];
        }
        s
    }
    fn index(&self, flat: usize) -> Vec<usize> {
        let mut rest = flat;
        self.nodes
            .iter()
            .map(|&n| {
                let i = rest % n;
                rest /= n;
                i
            })
            .collect()
    }

    pub fn coords(&self, flat: usize) -> Vec<f64> {
        self.index(flat)
            .iter()
            .enumerate()
            .map(|(k, &i)| self.bounds.lo[k] + i as f64 * self.spacing(k))
            .collect()
    }

    /// All node coordinates, row-major `len × dim`.
    pub fn points(&self) -> Vec<f64> {
        (0..self.len()).flat_map(|i| self.coords(i)).collect()
    }

    /// The same bounds with `2n - 1` nodes per axis (spacing halved).
    pub fn refined(&self) -> Self {
        Self {
            nodes: self.nodes.iter().map(|n| 2 * n - 1).collect(),
            bounds: self.bounds.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub nodes: usize,
    /// Grid box = Ω scaled by this factor about its center.
    pub margin: f64,
    /// Stop when the sup change between sweeps falls below this.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Allowed decrease between sweeps before a sweep counts as non-monotone.
    pub monotone_tol: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            nodes: 401,
            margin: 1.5,
            tol: 1e-9,
            max_sweeps: 60,
            monotone_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridSolution {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    /// Row-major `len × m`.
    pub policy: Vec<f64>,
    /// Nodal values after every policy-evaluation sweep.
    pub history: Vec<Vec<f64>>,
    pub sweeps: usize,
    pub converged: bool,
    /// Largest decrease seen between consecutive sweeps.
    pub worst_decrease: f64,
    pub refined: bool,
}

impl GridSolution {
    /// Multilinear interpolation, clamped to the grid box.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        interpolate(&self.spec, &self.values, x)
    }

    pub fn is_monotone(&self, tol: f64) -> bool {
        self.worst_decrease <= tol
    }

    /// Text format: a header naming each axis, then one value per line in
    /// shortest round-trip form.
    pub fn write_text(&self) -> String {
        write_grid_text(&self.spec, &self.values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.write_text())?;
        Ok(())
    }
}

pub fn interpolate(spec: &GridSpec, values: &[f64], x: &[f64]) -> f64 {
    let d = spec.dim();
    let strides = spec.strides();
    let mut base = 0;
    let mut frac = [0.0; 2];
    for k in 0..d {
        let h = spec.spacing(k);
        let t = ((x[k] - spec.bounds.lo[k]) / h).clamp(0.0, (spec.nodes[k] - 1) as f64);
        let i = (t.floor() as usize).min(spec.nodes[k] - 2);
        frac[k] = t - i as f64;
        base += i * strides[k];
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut idx = base;
        for k in 0..d {
            if corner >> k & 1 == 1 {
                w *= frac[k];
                idx += strides[k];
            } else {
                w *= 1.0 - frac[k];
            }
        }
        if w != 0.0 {
            acc += w * values[idx];
        }
    }
    acc
}

pub fn write_grid_text(spec: &GridSpec, values: &[f64]) -> String {
    let mut s = String::new();
    writeln!(s, "# pinn-pi grid v1").unwrap();
    writeln!(s, "dims {}", spec.dim()).unwrap();
    for k in 0..spec.dim() {
        writeln!(s, "axis {} {} {} {}", k, spec.nodes[k], spec.bounds.lo[k], spec.bounds.hi[k]).unwrap();
    }
    writeln!(s, "values {}", values.len()).unwrap();
    for v in values {
        writeln!(s, "{v}").unwrap();
    }
    s
}

pub fn read_grid_text(text: &str) -> Result<(GridSpec, Vec<f64>)> {
    let bad = |m: String| Error::Format(format!("grid file: {m}"));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let mut next = |what: &str| lines.next().ok_or_else(|| bad(format!("missing {what}")));
    let dims_line = next("dims")?;
    let dims: usize = dims_line
        .strip_prefix("dims ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad(format!("bad dims line `{dims_line}`")))?;
    let mut nodes = Vec::new();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for k in 0..dims {
        let line = next("axis")?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 || f[0] != "axis" || f[1].parse::<usize>().ok() != Some(k) {
            return Err(bad(format!("bad axis line `{line}`")));
        }
        nodes.push(f[2].parse().map_err(|_| bad(format!("bad node count `{}`", f[2])))?);
        lo.push(f[3].parse().map_err(|_| bad(format!("bad bound `{}`", f[3])))?);
        hi.push(f[4].parse().map_err(|_| bad(format!("bad bound `{}`", f[4])))?);
    }
    let vline = next("values")?;
    let count: usize = vline
        .strip_prefix("values ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad(format!("bad values line `{vline}`")))?;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next("value")?;
        values.push(line.trim().parse().map_err(|_| bad(format!("bad value `{line}`")))?);
    }
    let spec = GridSpec::new(nodes, BoxSet::new(lo, hi).map_err(|e| bad(e.to_string()))?)
        .map_err(|e| bad(e.to_string()))?;
    if spec.len() != count {
        return Err(bad(format!("{count} values for a grid of {} nodes", spec.len())));
    }
    Ok((spec, values))
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<(GridSpec, Vec<f64>)> {
    read_grid_text(&std::fs::read_to_string(path)?)
}

fn diagonal_diffusion(problem: &ControlProblem) -> Result<Vec<f64>> {
    let s = problem.sigma_sq();
    let d = s.nrows();
    for i in 0..d {
        for j in 0..d {
            if i != j && s[(i, j)] != 0.0 {
                return Err(Error::Oracle("grid solver requires a diagonal σσᵀ".into()));
            }
        }
    }
    Ok((0..d).map(|i| s[(i, i)]).collect())
}

/// Frozen-policy operator and reward vector for nodal `actions`.
pub fn assemble(problem: &ControlProblem, spec: &GridSpec, actions: &[f64]) -> Result<(StencilMatrix, Vec<f64>)> {
    let d = spec.dim();
    let m = problem.action_dim();
    if problem.state_dim() != d {
        return Err(Error::Oracle("grid dimension does not match the problem".into()));
    }
    let s_diag = diagonal_diffusion(problem)?;
    let lambda = problem.lambda();
    let n = spec.len();
    let mut a = StencilMatrix::new(n, spec.strides());
    let mut rhs = vec![0.0; n];
    let mut b = vec![0.0; d];
    for p in 0..n {
        let idx = spec.index(p);
        let x = spec.coords(p);
        let act = &actions[p * m..(p + 1) * m];
        problem.drift_into(&x, act, &mut b);
        rhs[p] = problem.cost(&x, act);
        let mut diag = lambda;
        for k in 0..d {
            let h = spec.spacing(k);
            let at_lo = idx[k] == 0;
            let at_hi = idx[k] + 1 == spec.nodes[k];
            let (mut c_lo, mut c_hi) = (0.0, 0.0);
            if !at_lo && !at_hi {
                let diff = 0.5 * s_diag[k] / (h * h);
                c_lo += diff;
                c_hi += diff;
            }
            if b[k] > 0.0 && !at_hi {
                c_hi += b[k] / h;
            } else if b[k] < 0.0 && !at_lo {
                c_lo -= b[k] / h;
            }
            diag += c_lo + c_hi;
            a.lo[p * d + k] = -c_lo;
            a.hi[p * d + k] = -c_hi;
        }
        a.diag[p] = diag;
    }
    if rhs.iter().any(|v| !v.is_finite()) || a.diag.iter().any(|v| !v.is_finite()) {
        return Err(Error::Oracle("non-finite coefficients in grid operator".into()));
    }
    Ok((a, rhs))
}

/// Solve the frozen-policy PDE for nodal actions; `forcing` replaces the
/// reward vector when given.
pub fn solve_frozen(problem: &ControlProblem, spec: &GridSpec, actions: &[f64], forcing: Option<&[f64]>) -> Result<Vec<f64>> {
    let (a, rhs) = assemble(problem, spec, actions)?;
    let rhs = forcing.map_or(rhs, |f| f.to_vec());
    let v = solve(&a, &rhs, None)?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Oracle("grid linear solve produced non-finite values".into()));
    }
    Ok(v)
}

/// Grid solution of the frozen-policy PDE for `policy`.
pub fn grid_solve_policy(problem: &ControlProblem, spec: &GridSpec, policy: &PolicyHandle) -> Result<GridSolution> {
    let actions = policy.act_batch(problem, &spec.points());
    let values = solve_frozen(problem, spec, &actions, None)?;
    Ok(GridSolution {
        spec: spec.clone(),
        history: vec![values.clone()],
        values,
        policy: actions,
        sweeps: 1,
        converged: true,
        worst_decrease: 0.0,
        refined: false,
    })
}

/// Discrete upwind Hamiltonian `L(x,a) + Σ_k b_k D_k^{up} v` at node `p`,
/// using the same boundary closure as the operator.
fn discrete_hamiltonian(problem: &ControlProblem, spec: &GridSpec, values: &[f64], p: usize, idx: &[usize], x: &[f64], a: &[f64], b: &mut [f64]) -> f64 {
    let strides = spec.strides();
    problem.drift_into(x, a, b);
    let mut h = problem.cost(x, a);
    for k in 0..spec.dim() {
        let hk = spec.spacing(k);
        if b[k] > 0.0 && idx[k] + 1 < spec.nodes[k] {
            h += b[k] * (values[p + strides[k]] - values[p]) / hk;
        } else if b[k] < 0.0 && idx[k] > 0 {
            h += b[k] * (values[p] - values[p - strides[k]]) / hk;
        }
    }
    h
}

/// One improvement sweep: per node, try the greedy action for every choice
/// of one-sided/central difference per axis plus the current action, and
/// keep the best under the discrete Hamiltonian.
fn improve_policy(problem: &ControlProblem, spec: &GridSpec, values: &[f64], old: &[f64], cfg: &GreedyConfig) -> Vec<f64> {
    let d = spec.dim();
    let m = problem.action_dim();
    let strides = spec.strides();
    let mut out = vec![0.0; old.len()];
    out.par_chunks_mut(m).enumerate().for_each(|(p, a_out)| {
        let idx = spec.index(p);
        let x = spec.coords(p);
        let mut options: Vec<Vec<f64>> = Vec::with_capacity(d);
        for k in 0..d {
            let hk = spec.spacing(k);
            let mut o = Vec::with_capacity(3);
            let fwd = (idx[k] + 1 < spec.nodes[k]).then(|| (values[p + strides[k]] - values[p]) / hk);
            let bwd = (idx[k] > 0).then(|| (values[p] - values[p - strides[k]]) / hk);
            o.extend(fwd);
            o.extend(bwd);
            if let (Some(f), Some(b)) = (fwd, bwd) {
                o.push(0.5 * (f + b));
            }
            options.push(o);
        }
        let mut b = vec![0.0; d];
        let old_a = &old[p * m..(p + 1) * m];
        let mut best = old_a.to_vec();
        let mut best_h = discrete_hamiltonian(problem, spec, values, p, &idx, &x, old_a, &mut b);
        let combos: usize = options.iter().map(|o| o.len()).product();
        let mut z = vec![0.0; d];
        for c in 0..combos {
            let mut rest = c;
            for k in 0..d {
                let n = options[k].len();
                z[k] = options[k][rest % n];
                rest /= n;
            }
            let mut cand = greedy_action(problem, &x, &z, cfg).action;
            problem.action_box().project(&mut cand);
            let h = discrete_hamiltonian(problem, spec, values, p, &idx, &x, &cand, &mut b);
            if h > best_h {
                best_h = h;
                best = cand;
            }
        }
        a_out.copy_from_slice(&best);
    });
    out
}

/// Exact policy iteration on the grid, starting from `initial` (default: the
/// box center).
pub fn grid_howard_pi(problem: &ControlProblem, cfg: &GridConfig, initial: Option<&PolicyHandle>) -> Result<GridSolution> {
    let spec = GridSpec::around(problem, cfg.nodes, cfg.margin)?;
    let sol = howard_on(problem, &spec, cfg, initial)?;
    if sol.is_monotone(cfg.monotone_tol * scale(&sol.values)) {
        return Ok(sol);
    }
    log::warn!(
        "grid sweeps decreased by {:e}; refining once",
        sol.worst_decrease
    );
    let mut fine = howard_on(problem, &spec.refined(), cfg, initial)?;
    fine.refined = true;
    Ok(fine)
}

fn scale(v: &[f64]) -> f64 {
    v.iter().fold(1.0f64, |m, x| m.max(x.abs()))
}

fn howard_on(problem: &ControlProblem, spec: &GridSpec, cfg: &GridConfig, initial: Option<&PolicyHandle>) -> Result<GridSolution> {
    let greedy_cfg = GreedyConfig::default();
    let start = initial.cloned().unwrap_or_else(|| PolicyHandle::box_center(problem));
    let mut policy = start.act_batch(problem, &spec.points());
    let mut values = solve_frozen(problem, spec, &policy, None)?;
    let mut history = vec![values.clone()];
    let mut worst_decrease: f64 = 0.0;
    let mut converged = false;
    let mut sweeps = 1;
    while sweeps < cfg.max_sweeps {
        let new_policy = improve_policy(problem, spec, &values, &policy, &greedy_cfg);
        let new_values = solve_frozen(problem, spec, &new_policy, None)?;
        sweeps += 1;
        let mut change: f64 = 0.0;
        for (n, o) in new_values.iter().zip(&values) {
            change = change.max((n - o).abs());
            worst_decrease = worst_decrease.max(o - n);
        }
        values = new_values;
        policy = new_policy;
        history.push(values.clone());
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("grid policy iteration stopped at max_sweeps = {}", cfg.max_sweeps);
    }
    Ok(GridSolution {
        spec: spec.clone(),
        values,
        policy,
        history,
        sweeps,
        converged,
        worst_decrease,
        refined: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::riccati::solve_riccati_discounted;
    use crate::problems::{make_constant_cost_with, make_scalar_lqr, Lqr};
    use nalgebra::DMatrix;

    fn scalar_lqr() -> ControlProblem {
        make_scalar_lqr(0.0, 1.0, 1.0, 1.0, 10.0, 0.1, 2.0, 3.0).unwrap()
    }

    fn scalar_riccati() -> crate::oracle::RiccatiSolution {
        let one = |v| DMatrix::from_element(1, 1, v);
        let lqr = Lqr {
            a: one(0.0),
            b: one(1.0),
            q: one(1.0),
            r: one(1.0),
        };
        solve_riccati_discounted(&lqr, 2.0, &one(0.01)).unwrap()
    }

    #[test]
    fn constant_reward_is_exact() {
        let p = make_constant_cost_with(1.0, 1.0, 1, 0.0, 0.1, BoxSet::symmetric(1, 1.0)).unwrap();
        let sol = grid_howard_pi(&p, &GridConfig::default(), None).unwrap();
        assert!(sol.values.iter().all(|v| (v - 1.0).abs() < 1e-9));
        let p2 = make_constant_cost_with(2.0, 1.0, 2, 0.5, 0.1, BoxSet::symmetric(2, 1.0)).unwrap();
        let cfg = GridConfig {
            nodes: 41,
            ..Default::default()
        };
        let sol = grid_howard_pi(&p2, &cfg, None).unwrap();
        assert!(sol.values.iter().all(|v| (v - 2.0).abs() < 1e-9));
    }

    fn interior_error(sol: &GridSolution, ric: &crate::oracle::RiccatiSolution) -> f64 {
        // relative discrete L² error on the interior half of Ω = [-3, 3]
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..sol.spec.len() {
            let x = sol.spec.coords(i);
            if x[0].abs() <= 1.5 {
                let exact = ric.value(&x);
                num += (sol.values[i] - exact).powi(2);
                den += exact * exact;
            }
        }
        (num / den).sqrt()
    }

    #[test]
    fn scalar_lqr_matches_riccati_and_is_monotone() {
        let p = scalar_lqr();
        let sol = grid_howard_pi(&p, &GridConfig::default(), None).unwrap();
        assert!(sol.converged);
        assert!(sol.worst_decrease <= 1e-9, "decrease {}", sol.worst_decrease);
        let ric = scalar_riccati();
        let err = interior_error(&sol, &ric);
        assert!(err < 1e-2, "interior relative error {err}");
        for w in sol.history.windows(2) {
            for (n, o) in w[1].iter().zip(&w[0]) {
                assert!(*n >= o - 1e-9);
            }
        }
    }

    #[test]
    fn halving_spacing_halves_interior_error() {
        let p = scalar_lqr();
        let ric = scalar_riccati();
        let coarse = grid_howard_pi(&p, &GridConfig { nodes: 101, ..Default::default() }, None).unwrap();
        let fine = grid_howard_pi(&p, &GridConfig { nodes: 201, ..Default::default() }, None).unwrap();
        let ratio = interior_error(&coarse, &ric) / interior_error(&fine, &ric);
        assert!((1.5..3.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn frozen_solve_is_linear_in_forcing() {
        let p = scalar_lqr();
        let spec = GridSpec::around(&p, 101, 1.5).unwrap();
        let pol = PolicyHandle::explicit("k", |x, a| a[0] = (-0.8 * x[0]).clamp(-10.0, 10.0));
        let acts = pol.act_batch(&p, &spec.points());
        let (_, l) = assemble(&p, &spec, &acts).unwrap();
        let v1 = solve_frozen(&p, &spec, &acts, Some(&l)).unwrap();
        let l2: Vec<f64> = l.iter().map(|v| 2.0 * v).collect();
        let v2 = solve_frozen(&p, &spec, &acts, Some(&l2)).unwrap();
        for (a, b) in v1.iter().zip(&v2) {
            assert!((b - 2.0 * a).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn operator_is_an_m_matrix() {
        let p = crate::problems::make_pendulum().unwrap();
        let spec = GridSpec::around(&p, 31, 1.5).unwrap();
        let acts = vec![1.5; spec.len()];
        let (a, _) = assemble(&p, &spec, &acts).unwrap();
        assert!(a.dominance_margin() >= p.lambda() - 1e-9);
        assert!(a.lo.iter().chain(&a.hi).all(|v| *v <= 0.0));
    }

    #[test]
    fn interpolation_is_exact_for_bilinear_functions() {
        let spec = GridSpec::new(vec![5, 7], BoxSet::new(vec![-1.0, 0.0], vec![1.0, 3.0]).unwrap()).unwrap();
        let f = |x: &[f64]| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1];
        let vals: Vec<f64> = (0..spec.len()).map(|i| f(&spec.coords(i))).collect();
        for x in [[0.3, 1.1], [-0.99, 2.9], [1.0, 3.0], [-1.0, 0.0]] {
            assert!((interpolate(&spec, &vals, &x) - f(&x)).abs() < 1e-12);
        }
    }

    #[test]
    fn text_round_trip() {
        let spec = GridSpec::new(vec![4], BoxSet::new(vec![-1.5], vec![2.0]).unwrap()).unwrap();
        let vals = vec![0.1, -1.0 / 3.0, 1e-300, 12345.678];
        let text = write_grid_text(&spec, &vals);
        let (s2, v2) = read_grid_text(&text).unwrap();
        assert_eq!(s2, spec);
        assert_eq!(v2, vals);
        assert!(read_grid_text("dims 1\naxis 0 4 0 1\nvalues 3\n1\n2\n3\n").is_err());
        assert!(read_grid_text("dims x\n").is_err());
    }

    #[test]
    fn rejects_three_dimensions() {
        let p = crate::problems::make_lqr(3, 3, 0, 10.0, 0.1, 1.0).unwrap();
        assert!(matches!(grid_howard_pi(&p, &GridConfig::default(), None), Err(Error::Oracle(_))));
    }
}
