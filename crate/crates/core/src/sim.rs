//! Euler–Maruyama rollouts, Monte-Carlo value estimates, and the diagnostics
//! computed on outer-iteration traces.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::domain::seeded_rng;
use crate::error::{Error, Result};
use crate::improve::PolicyHandle;
use crate::problems::ControlProblem;

/// States beyond this sup-norm end a rollout.
pub const BLOW_UP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Row-major `(steps + 1) × d`.
    pub trajectory: Vec<f64>,
    pub discounted_return: f64,
    pub blew_up: bool,
}

fn check_horizon(t: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t >= dt) {
        return Err(Error::Config(format!("need dt > 0 and T ≥ dt (got T={t}, dt={dt})")));
    }
    Ok((t / dt).round() as usize)
}

/// Weight of step `k` in the discounted sum: `∫_{t_k}^{t_{k+1}} e^{-λt} dt`.
/// Exact for rewards held constant over each step.
fn step_weights(lambda: f64, dt: f64, steps: usize) -> Vec<f64> {
    let w0 = (1.0 - (-lambda * dt).exp()) / lambda;
    let decay = (-lambda * dt).exp();
    let mut w = Vec::with_capacity(steps);
    let mut cur = w0;
    for _ in 0..steps {
        w.push(cur);
        cur *= decay;
    }
    w
}

/// One Euler–Maruyama trajectory from `x0` over `[0, T]`.
pub fn rollout(problem: &ControlProblem, policy: &PolicyHandle, x0: &[f64], t: f64, dt: f64, seed: u64) -> Result<Rollout> {
    let steps = check_horizon(t, dt)?;
    let d = problem.state_dim();
    let m = problem.action_dim();
    let weights = step_weights(problem.lambda(), dt, steps);
    let sigma = problem.sigma();
    let sqdt = dt.sqrt();
    let mut rng = seeded_rng(seed, 0x5e);
    let mut x = x0.to_vec();
    problem.dynamics().canonicalize(&mut x);
    let mut traj = x.clone();
    let mut a = vec![0.0; m];
    let mut b = vec![0.0; d];
    let mut xi = vec![0.0; d];
    let mut ret = 0.0;
    let mut blew_up = false;
    for w in weights {
        policy.act(problem, &x, &mut a);
        ret += w * problem.cost(&x, &a);
        problem.drift_into(&x, &a, &mut b);
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..d {
            let mut noise = 0.0;
            if !problem.is_noiseless() {
                for j in 0..d {
                    noise += sigma[(i, j)] * xi[j];
                }
            }
            x[i] += b[i] * dt + noise * sqdt;
        }
        problem.dynamics().canonicalize(&mut x);
        traj.extend_from_slice(&x);
        if x.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) {
            blew_up = true;
            break;
        }
    }
    Ok(Rollout {
        trajectory: traj,
        discounted_return: ret,
        blew_up,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_rollouts: usize,
    pub blown_up: usize,
}

/// Discounted returns of rollouts started at the rows of `starts`, simulated
/// in lockstep so the policy is evaluated on whole batches. Rollouts come in
/// antithetic pairs `(ξ, -ξ)`; pair `j` draws from its own stream.
pub fn simulate_returns(
    problem: &ControlProblem,
    policy: &PolicyHandle,
    starts: &[f64],
    t: f64,
    dt: f64,
    seed: u64,
) -> Result<(Vec<f64>, usize)> {
    let steps = check_horizon(t, dt)?;
    let d = problem.state_dim();
    let m = problem.action_dim();
    let n = starts.len() / d;
    let weights = step_weights(problem.lambda(), dt, steps);
    let sigma = problem.sigma();
    let sqdt = dt.sqrt();
    let n_pairs = n.div_ceil(2);
    let mut rngs: Vec<_> = (0..n_pairs).map(|j| seeded_rng(seed, 0x1000 + j as u64)).collect();
    let mut x = starts.to_vec();
    for row in x.chunks_exact_mut(d) {
        problem.dynamics().canonicalize(row);
    }
    let mut alive = vec![true; n];
    let mut returns = vec![0.0; n];
    let mut b = vec![0.0; d];
    let mut xi = vec![0.0; d];
    let mut live_idx: Vec<usize> = (0..n).collect();
    let mut live_pts = Vec::with_capacity(n * d);
    for w in weights {
        live_idx.retain(|&i| alive[i]);
        if live_idx.is_empty() {
            break;
        }
        live_pts.clear();
        for &i in &live_idx {
            live_pts.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        let actions = policy.act_batch(problem, &live_pts);
        // noise for every pair is drawn even when a member has stopped, so
        // streams stay aligned with the step index
        let mut pair_noise = vec![0.0; n_pairs * d];
        if !problem.is_noiseless() {
            for (j, rng) in rngs.iter_mut().enumerate() {
                for v in xi.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                for r in 0..d {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += sigma[(r, c)] * xi[c];
                    }
                    pair_noise[j * d + r] = s * sqdt;
                }
            }
        }
        for (k, &i) in live_idx.iter().enumerate() {
            let xs = &mut x[i * d..(i + 1) * d];
            let a = &actions[k * m..(k + 1) * m];
            returns[i] += w * problem.cost(xs, a);
            problem.drift_into(xs, a, &mut b);
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let noise = &pair_noise[(i / 2) * d..(i / 2 + 1) * d];
            for r in 0..d {
                xs[r] += b[r] * dt + sign * noise[r];
            }
            problem.dynamics().canonicalize(xs);
            if xs.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) {
                alive[i] = false;
            }
        }
    }
    let blown = alive.iter().filter(|a| !**a).count();
    Ok((returns, blown))
}

fn pair_statistics(returns: &[f64]) -> (f64, f64) {
    let samples: Vec<f64> = returns
        .chunks(2)
        .map(|p| p.iter().sum::<f64>() / p.len() as f64)
        .collect();
    let n = samples.len() as f64;
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let pm = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - pm).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean and standard error of the discounted return from `x0`. The standard
/// error treats each antithetic pair average as one sample.
pub fn estimate_value_mc(
    problem: &ControlProblem,
    policy: &PolicyHandle,
    x0: &[f64],
    n_rollouts: usize,
    t: f64,
    dt: f64,
    seed: u64,
) -> Result<McEstimate> {
    if n_rollouts < 2 {
        return Err(Error::Config("Monte-Carlo estimate needs at least 2 rollouts".into()));
    }
    let starts: Vec<f64> = (0..n_rollouts).flat_map(|_| x0.iter().cloned()).collect();
    estimate_from_starts(problem, policy, &starts, t, dt, seed)
}

/// Like [`estimate_value_mc`] with one start state per rollout.
pub fn estimate_from_starts(problem: &ControlProblem, policy: &PolicyHandle, starts: &[f64], t: f64, dt: f64, seed: u64) -> Result<McEstimate> {
    let (returns, blown) = simulate_returns(problem, policy, starts, t, dt, seed)?;
    let (mean, stderr) = pair_statistics(&returns);
    Ok(McEstimate {
        mean,
        stderr,
        n_rollouts: returns.len(),
        blown_up: blown,
    })
}

/// Default horizon `20/λ`.
pub fn default_horizon(problem: &ControlProblem) -> f64 {
    20.0 / problem.lambda()
}

// ---------------------------------------------------------------------------
// Outer-iteration trace
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Probe-set estimate of the residual L² norm (`p_n`).
    pub residual_l2: f64,
    pub p_target: f64,
    pub train_steps: usize,
    pub final_loss: f64,
    /// `‖a_{n+1} - a_n‖_∞` on the probe points.
    pub policy_sup_distance: f64,
    /// Share of probe points where the new action does at least as well as
    /// the old one on the greedy objective.
    pub improvement_fraction: f64,
    /// L² gap to the grid policy-iteration solution over Ω.
    pub grid_l2_gap: Option<f64>,
    pub grid_rel_gap: Option<f64>,
    /// L² gap to the grid solution of the same frozen policy.
    pub frozen_l2_gap: Option<f64>,
    /// Riccati comparison restricted to the constraint-inactive region.
    pub riccati_l2_gap: Option<f64>,
    pub riccati_rel_gap: Option<f64>,
    pub mc_return: Option<f64>,
    pub mc_stderr: Option<f64>,
    /// Seconds. Kept out of the CSV so traces are byte-reproducible.
    pub wall_time: f64,
    #[serde(skip)]
    pub probe_values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationTrace {
    /// Row-major probe points shared by all iterations.
    pub probe_points: Vec<f64>,
    pub dim: usize,
    pub records: Vec<IterationRecord>,
}

const CSV_HEADER: &str = "iteration,residual_l2,p_target,train_steps,final_loss,policy_sup_distance,improvement_fraction,grid_l2_gap,grid_rel_gap,frozen_l2_gap,riccati_l2_gap,riccati_rel_gap,mc_return,mc_stderr";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl IterationTrace {
    pub fn new(probe_points: Vec<f64>, dim: usize) -> Self {
        Self {
            probe_points,
            dim,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Append a record; iteration numbers must increase and snapshot lengths
    /// must match the probe set.
    pub fn push(&mut self, rec: IterationRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.iteration <= last.iteration {
                return Err(Error::Config(format!(
                    "iteration {} does not follow {}",
                    rec.iteration, last.iteration
                )));
            }
        }
        let n_probe = self.probe_points.len().checked_div(self.dim).unwrap_or(0);
        if rec.probe_values.len() != n_probe {
            return Err(Error::Config(format!(
                "snapshot has {} values for {n_probe} probe points",
                rec.probe_values.len()
            )));
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.residual_l2).collect()
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.residual_l2,
                r.p_target,
                r.train_steps,
                r.final_loss,
                r.policy_sup_distance,
                r.improvement_fraction,
                opt(r.grid_l2_gap),
                opt(r.grid_rel_gap),
                opt(r.frozen_l2_gap),
                opt(r.riccati_l2_gap),
                opt(r.riccati_rel_gap),
                opt(r.mc_return),
                opt(r.mc_stderr),
            )?;
        }
        Ok(())
    }

    /// Probe snapshots, one row per iteration.
    pub fn write_probe_csv(&self, w: &mut impl Write) -> Result<()> {
        let n = self.probe_points.len().checked_div(self.dim).unwrap_or(0);
        write!(w, "iteration")?;
        for j in 0..n {
            write!(w, ",v{j}")?;
        }
        writeln!(w)?;
        for r in &self.records {
            write!(w, "{}", r.iteration)?;
            for v in &r.probe_values {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn save_probe_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_probe_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slack {
    Fixed(f64),
    /// `factor · max(p_n, p_{n+1})` for the pair `(n, n+1)`.
    ResidualMultiple(f64),
}

impl Default for Slack {
    fn default() -> Self {
        Slack::ResidualMultiple(2.0)
    }
}

/// Fraction of `(probe, n)` pairs with `v_{n+1}(x_j) ≥ v_n(x_j) - slack_n`.
pub fn monotonicity_fraction(snapshots: &[Vec<f64>], slacks: &[f64]) -> Result<f64> {
    if snapshots.len() < 2 {
        return Err(Error::Config("monotonicity needs at least two iterations".into()));
    }
    let mut ok = 0usize;
    let mut total = 0usize;
    for (n, w) in snapshots.windows(2).enumerate() {
        for (new, old) in w[1].iter().zip(&w[0]) {
            total += 1;
            if *new >= old - slacks[n] {
                ok += 1;
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { ok as f64 / total as f64 })
}

pub fn monotonicity_report(trace: &IterationTrace, slack: Slack) -> Result<f64> {
    let snaps: Vec<Vec<f64>> = trace.records.iter().map(|r| r.probe_values.clone()).collect();
    let slacks: Vec<f64> = trace
        .records
        .windows(2)
        .map(|w| match slack {
            Slack::Fixed(s) => s,
            Slack::ResidualMultiple(f) => f * w[0].residual_l2.max(w[1].residual_l2),
        })
        .collect();
    monotonicity_fraction(&snaps, &slacks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub kappa_hat: f64,
    pub floor_estimate: f64,
    /// Number of leading terms used in the fit.
    pub fitted: usize,
    pub contracting: bool,
}

/// Geometric rate of `errors` before they reach their plateau.
///
/// The floor is the mean of the trailing `floor_window` values (0 for no
/// floor). The fit uses the longest prefix whose floor-adjusted errors stay
/// positive and above a tenth of the floor, and regresses their logarithm on
/// the iteration index.
pub fn fit_convergence_rate(errors: &[f64], floor_window: usize) -> Result<RateFit> {
    if errors.len() < 4 {
        return Err(Error::Config("rate fit needs at least 4 iterations".into()));
    }
    if floor_window > errors.len() {
        return Err(Error::Config("floor window longer than the error sequence".into()));
    }
    let floor = if floor_window == 0 {
        0.0
    } else {
        errors[errors.len() - floor_window..].iter().sum::<f64>() / floor_window as f64
    };
    let mut pts = Vec::new();
    for (n, e) in errors.iter().enumerate() {
        let adj = e - floor;
        if !(adj > 0.0 && adj > 0.1 * floor) {
            break;
        }
        pts.push((n as f64, adj.ln()));
    }
    if pts.len() < 2 {
        return Ok(RateFit {
            kappa_hat: 1.0,
            floor_estimate: floor,
            fitted: pts.len(),
            contracting: false,
        });
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let kappa = (sxy / sxx).exp();
    Ok(RateFit {
        kappa_hat: kappa,
        floor_estimate: floor,
        fitted: pts.len(),
        contracting: kappa < 1.0 - 1e-9,
    })
}
