//! Run configuration and the outer policy-iteration loop.
//!
//! Output layout of a run directory:
//!
//! ```text
//! trace.csv          one row per outer iteration (no wall-clock columns)
//! probe_values.csv   value snapshots at the fixed probe points
//! summary.json       final gaps, rate fit, monotonicity, timings
//! ckpt_<n>           network checkpoint after iteration n
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{policy_evaluation_train, TrainConfig};
use crate::improve::{greedy_objectives, sup_distance, GreedyConfig, PolicyHandle};
use crate::net::{default_architecture, save_checkpoint, Activation, Outputs, ProblemRef, ValueNet};
use crate::oracle::grid::{interpolate, GridSpec};
use crate::oracle::{grid_howard_pi, grid_solve_policy, l2_from_squares, solve_riccati_discounted, GridConfig, GridSolution, RiccatiSolution};
use crate::problems::{validate_assumptions, ControlProblem, ProblemSpec, TheoryConstants};
use crate::sim::{default_horizon, estimate_from_starts, fit_convergence_rate, monotonicity_report, IterationRecord, IterationTrace, RateFit, Slack};

/// Offsets added to the master seed for each consumer.
pub mod seeds {
    pub const NET_INIT: u64 = 1;
    pub const COMPARE: u64 = 2;
    pub const ASSUMPTIONS: u64 = 4;
    pub const TRAIN: u64 = 1000;
    pub const ROLLOUTS: u64 = 3000;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Hidden widths; empty selects the default for the state dimension.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: Vec::new(),
            activation: Activation::Tanh,
        }
    }
}

impl NetworkConfig {
    pub fn widths(&self, d: usize) -> Vec<usize> {
        if self.hidden.is_empty() {
            default_architecture(d)
        } else {
            let mut w = vec![d];
            w.extend(&self.hidden);
            w.push(1);
            w
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuterConfig {
    pub max_outer: usize,
    /// Stop once the policy moves less than this in sup norm on the probes.
    pub stop_eps: f64,
    pub probe_points: usize,
    /// Reuse the previous iteration's parameters.
    pub warm_start: bool,
    /// Write `curve_<n>.csv` training curves.
    pub save_curves: bool,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            max_outer: 30,
            stop_eps: 1e-3,
            probe_points: 256,
            warm_start: true,
            save_curves: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub riccati: bool,
    pub grid: bool,
    pub grid_nodes: usize,
    pub grid_margin: f64,
    /// Also solve the frozen-policy PDE of every iterate on the grid.
    pub grid_frozen: bool,
    /// Uniform points of Ω used for the L² comparisons.
    pub compare_points: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            riccati: true,
            grid: true,
            grid_nodes: 401,
            grid_margin: 1.5,
            grid_frozen: true,
            compare_points: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Rollouts per iteration; 0 disables the Monte-Carlo column.
    pub rollouts: usize,
    /// Horizon; `None` means `20/λ`.
    pub horizon: Option<f64>,
    pub dt: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rollouts: 64,
            horizon: None,
            dt: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub outdir: Option<PathBuf>,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub evaluate: TrainConfig,
    #[serde(default)]
    pub outer: OuterConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub sim: SimConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Parse `text` after applying dotted-key overrides such as
    /// `outer.max_outer=5` or `problem.name=pendulum`.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.evaluate.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.outer.max_outer == 0 {
            return bad("outer.max_outer must be positive".into());
        }
        if !(self.outer.stop_eps > 0.0) {
            return bad("outer.stop_eps must be positive".into());
        }
        if self.outer.probe_points == 0 {
            return bad("outer.probe_points must be positive".into());
        }
        if self.network.hidden.contains(&0) {
            return bad("network.hidden widths must be positive".into());
        }
        if self.oracle.grid_nodes < 3 || !(self.oracle.grid_margin >= 1.0) {
            return bad("oracle.grid_nodes ≥ 3 and oracle.grid_margin ≥ 1 required".into());
        }
        if self.oracle.compare_points < 1000 {
            return bad("oracle.compare_points must be at least 1000".into());
        }
        if !(self.sim.dt > 0.0) || self.sim.horizon.is_some_and(|t| !(t >= self.sim.dt)) {
            return bad("sim needs dt > 0 and horizon ≥ dt".into());
        }
        if self.sim.rollouts == 1 {
            return bad("sim.rollouts must be 0 or at least 2".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be positive".into());
        }
        Ok(())
    }

    pub fn problem_ref(&self) -> ProblemRef {
        ProblemRef {
            seed: self.seed,
            problem: self.problem.clone(),
        }
    }

    pub fn build_problem(&self) -> Result<ControlProblem> {
        self.problem.build(self.seed)
    }
}

/// Set one `dotted.key=value` entry. The value is read as a TOML literal
/// when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Run `f` on a pool with the configured thread count.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Reference solutions and the fixed comparison sample.
pub struct Oracles {
    pub riccati: Option<RiccatiSolution>,
    pub grid: Option<GridSolution>,
    /// Row-major uniform sample of Ω.
    pub points: Vec<f64>,
    pub grid_values: Option<Vec<f64>>,
    /// Indices of `points` where the Riccati control stays inside the box.
    pub inactive: Vec<usize>,
    pub riccati_values: Option<Vec<f64>>,
    pub volume: f64,
    dim: usize,
}

impl Oracles {
    pub fn build(cfg: &RunConfig, problem: &ControlProblem) -> Result<Self> {
        let d = problem.state_dim();
        let points = problem
            .domain()
            .sample_uniform(cfg.oracle.compare_points, &mut crate::domain::seeded_rng(cfg.seed + seeds::COMPARE, 0));
        let riccati = match (cfg.oracle.riccati, cfg.problem.lqr_matrices(cfg.seed)) {
            (true, Some(lqr)) => Some(solve_riccati_discounted(&lqr, problem.lambda(), problem.sigma_sq())?),
            _ => None,
        };
        let grid = if cfg.oracle.grid && d <= 2 {
            let gcfg = GridConfig {
                nodes: cfg.oracle.grid_nodes,
                margin: cfg.oracle.grid_margin,
                ..Default::default()
            };
            Some(grid_howard_pi(problem, &gcfg, None)?)
        } else {
            None
        };
        let grid_values = grid
            .as_ref()
            .map(|g| points.chunks_exact(d).map(|x| g.interpolate(x)).collect());
        let mut inactive = Vec::new();
        let riccati_values = riccati.as_ref().map(|r| {
            let bx = problem.action_box();
            points
                .chunks_exact(d)
                .enumerate()
                .map(|(i, x)| {
                    if bx.contains(&r.control(x)) {
                        inactive.push(i);
                    }
                    r.value(x)
                })
                .collect()
        });
        Ok(Self {
            riccati,
            grid,
            points,
            grid_values,
            inactive,
            riccati_values,
            volume: problem.domain().volume(),
            dim: d,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_none() && self.riccati.is_none()
    }

    /// Absolute and relative L² gaps of `values` (at `self.points`) to the grid.
    pub fn grid_gap(&self, values: &[f64]) -> Option<(f64, f64)> {
        let g = self.grid_values.as_ref()?;
        Some(gap(values, g, None, self.volume))
    }

    /// Gaps to the Riccati value on the constraint-inactive subset.
    pub fn riccati_gap(&self, values: &[f64]) -> Option<(f64, f64)> {
        let r = self.riccati_values.as_ref()?;
        if self.inactive.is_empty() {
            return None;
        }
        Some(gap(values, r, Some(&self.inactive), self.volume * self.inactive_fraction()))
    }

    pub fn inactive_fraction(&self) -> f64 {
        self.inactive.len() as f64 / self.len().max(1) as f64
    }

    /// Number of comparison points.
    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }
}

fn gap(values: &[f64], reference: &[f64], subset: Option<&[usize]>, vol: f64) -> (f64, f64) {
    let idx: Vec<usize> = subset.map_or_else(|| (0..values.len()).collect(), |s| s.to_vec());
    let diff: Vec<f64> = idx.iter().map(|&i| (values[i] - reference[i]).powi(2)).collect();
    let norm: Vec<f64> = idx.iter().map(|&i| reference[i].powi(2)).collect();
    let abs = l2_from_squares(&diff, vol).value;
    let rel = abs / l2_from_squares(&norm, vol).value.max(1e-300);
    (abs, rel)
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub problem: String,
    pub state_dim: usize,
    pub iterations: usize,
    pub converged: bool,
    pub final_residual_l2: f64,
    pub final_policy_sup_distance: f64,
    pub final_grid_l2_gap: Option<f64>,
    pub final_grid_rel_gap: Option<f64>,
    pub final_riccati_l2_gap: Option<f64>,
    pub final_riccati_rel_gap: Option<f64>,
    pub riccati_inactive_fraction: Option<f64>,
    pub gap_series: Vec<f64>,
    pub rate_fit: Option<RateFit>,
    pub monotonicity_fraction: Option<f64>,
    pub min_improvement_fraction: f64,
    pub grid_sweeps: Option<usize>,
    pub grid_monotone: Option<bool>,
    pub theory: Option<TheoryConstants>,
    pub wall_times: Vec<f64>,
    pub total_wall_time: f64,
}

pub struct RunOutcome {
    pub trace: IterationTrace,
    pub summary: Summary,
    pub net: ValueNet,
    pub problem: ControlProblem,
    pub oracles: Oracles,
}

/// Outer policy-iteration loop; returns the trace.
pub fn run_pinn_pi(cfg: &RunConfig) -> Result<IterationTrace> {
    Ok(run_pinn_pi_full(cfg)?.trace)
}

/// Outer loop with every by-product.
pub fn run_pinn_pi_full(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let problem = cfg.build_problem()?;
    if let Some(dir) = &cfg.outdir {
        std::fs::create_dir_all(dir)?;
    }
    with_threads(cfg.threads, || outer_loop(cfg, problem))?
}

fn outer_loop(cfg: &RunConfig, problem: ControlProblem) -> Result<RunOutcome> {
    let start = Instant::now();
    let d = problem.state_dim();
    let theory = match validate_assumptions(&problem, 10_000, cfg.seed + seeds::ASSUMPTIONS) {
        Ok(t) => Some(t),
        Err(e) => {
            log::warn!("assumption check failed: {e}");
            None
        }
    };
    let oracles = Oracles::build(cfg, &problem)?;
    let frozen_spec = match &oracles.grid {
        Some(g) if cfg.oracle.grid_frozen => Some(g.spec.clone()),
        _ => None,
    };

    let widths = cfg.network.widths(d);
    let mut net = ValueNet::init(&widths, cfg.network.activation, cfg.seed + seeds::NET_INIT)?;
    let probe = problem.domain().halton(cfg.outer.probe_points);
    let mut trace = IterationTrace::new(probe.clone(), d);
    let mut policy = PolicyHandle::box_center(&problem);
    let mut prev_actions = policy.act_batch(&problem, &probe);
    let horizon = cfg.sim.horizon.unwrap_or_else(|| default_horizon(&problem));
    let mc_starts: Vec<f64> = oracles
        .points
        .chunks_exact(d)
        .take(cfg.sim.rollouts.div_ceil(2))
        .flat_map(|x| x.iter().chain(x.iter()).cloned().collect::<Vec<_>>())
        .take(cfg.sim.rollouts * d)
        .collect();
    let mut converged = false;
    let mut wall_times = Vec::new();

    for n in 0..cfg.outer.max_outer {
        let t0 = Instant::now();
        if !cfg.outer.warm_start && n > 0 {
            net = ValueNet::init(&widths, cfg.network.activation, cfg.seed + seeds::NET_INIT)?;
        }
        let mut tcfg = cfg.evaluate.clone();
        tcfg.seed = cfg.seed + seeds::TRAIN + n as u64;
        let report = match policy_evaluation_train(&mut net, &problem, &policy, &tcfg) {
            Ok(r) => r,
            Err(Error::TrainingDiverged { step, loss, .. }) => {
                persist(cfg, &trace, None)?;
                return Err(Error::TrainingDiverged {
                    step,
                    loss,
                    trace: Box::new(trace),
                });
            }
            Err(e) => {
                persist(cfg, &trace, None)?;
                return Err(e);
            }
        };
        if let (true, Some(dir)) = (cfg.outer.save_curves, &cfg.outdir) {
            report.save_curve_csv(dir.join(format!("curve_{n}.csv")))?;
        }

        let frozen = Arc::new(net.clone());
        let probe_values = frozen.eval_batch(&probe, None, Outputs::Value).values;
        let new_policy = PolicyHandle::greedy(frozen.clone(), GreedyConfig::default()).with_label(format!("greedy {n}"));
        let new_actions = new_policy.act_batch(&problem, &probe);
        let f_new = greedy_objectives(&problem, &frozen, &probe, &new_actions);
        let f_old = greedy_objectives(&problem, &frozen, &probe, &prev_actions);
        let improved = f_new.iter().zip(&f_old).filter(|(a, b)| **a >= **b - 1e-9).count();

        let compare_values = frozen.eval_batch(&oracles.points, None, Outputs::Value).values;
        let grid_gap = oracles.grid_gap(&compare_values);
        let ric_gap = oracles.riccati_gap(&compare_values);
        let frozen_gap = match &frozen_spec {
            Some(spec) => Some(frozen_policy_gap(&problem, spec, &policy, &oracles, &compare_values)?),
            None => None,
        };
        let mc = if cfg.sim.rollouts >= 2 {
            Some(estimate_from_starts(
                &problem,
                &new_policy,
                &mc_starts,
                horizon,
                cfg.sim.dt,
                cfg.seed + seeds::ROLLOUTS + n as u64,
            )?)
        } else {
            None
        };

        let dist = sup_distance(&new_actions, &prev_actions);
        let wall = t0.elapsed().as_secs_f64();
        wall_times.push(wall);
        trace.push(IterationRecord {
            iteration: n,
            residual_l2: report.residual_l2_estimate,
            p_target: report.p_target,
            train_steps: report.steps_taken,
            final_loss: report.final_loss,
            policy_sup_distance: dist,
            improvement_fraction: improved as f64 / f_new.len() as f64,
            grid_l2_gap: grid_gap.map(|g| g.0),
            grid_rel_gap: grid_gap.map(|g| g.1),
            frozen_l2_gap: frozen_gap,
            riccati_l2_gap: ric_gap.map(|g| g.0),
            riccati_rel_gap: ric_gap.map(|g| g.1),
            mc_return: mc.map(|m| m.mean),
            mc_stderr: mc.map(|m| m.stderr),
            wall_time: wall,
            probe_values,
        })?;
        log::info!(
            "iteration {n}: residual {:.3e}, policy change {:.3e}, {} steps",
            report.residual_l2_estimate,
            dist,
            report.steps_taken
        );
        if let Some(dir) = &cfg.outdir {
            save_checkpoint(dir.join(format!("ckpt_{n}")), &net, Some(&cfg.problem_ref()))?;
        }
        policy = new_policy;
        prev_actions = new_actions;
        if dist < cfg.outer.stop_eps {
            converged = true;
            break;
        }
    }

    let summary = summarize(&problem, &trace, &oracles, theory, converged, wall_times, start.elapsed().as_secs_f64());
    persist(cfg, &trace, Some(&summary))?;
    Ok(RunOutcome {
        trace,
        summary,
        net,
        problem,
        oracles,
    })
}

/// L² gap between the net and the grid solution of the policy it was trained on.
fn frozen_policy_gap(problem: &ControlProblem, spec: &GridSpec, policy: &PolicyHandle, oracles: &Oracles, values: &[f64]) -> Result<f64> {
    let sol = grid_solve_policy(problem, spec, policy)?;
    let d = problem.state_dim();
    let reference: Vec<f64> = oracles
        .points
        .chunks_exact(d)
        .map(|x| interpolate(spec, &sol.values, x))
        .collect();
    Ok(gap(values, &reference, None, oracles.volume).0)
}

fn summarize(
    problem: &ControlProblem,
    trace: &IterationTrace,
    oracles: &Oracles,
    theory: Option<TheoryConstants>,
    converged: bool,
    wall_times: Vec<f64>,
    total: f64,
) -> Summary {
    let last = trace.records.last();
    let gap_series: Vec<f64> = trace
        .records
        .iter()
        .filter_map(|r| r.grid_l2_gap.or(r.riccati_l2_gap))
        .collect();
    let rate_fit = (gap_series.len() >= 4)
        .then(|| fit_convergence_rate(&gap_series, (gap_series.len() / 4).max(1)).ok())
        .flatten();
    Summary {
        problem: problem.name().to_string(),
        state_dim: problem.state_dim(),
        iterations: trace.len(),
        converged,
        final_residual_l2: last.map_or(f64::NAN, |r| r.residual_l2),
        final_policy_sup_distance: last.map_or(f64::NAN, |r| r.policy_sup_distance),
        final_grid_l2_gap: last.and_then(|r| r.grid_l2_gap),
        final_grid_rel_gap: last.and_then(|r| r.grid_rel_gap),
        final_riccati_l2_gap: last.and_then(|r| r.riccati_l2_gap),
        final_riccati_rel_gap: last.and_then(|r| r.riccati_rel_gap),
        riccati_inactive_fraction: oracles.riccati.as_ref().map(|_| oracles.inactive_fraction()),
        gap_series,
        rate_fit,
        monotonicity_fraction: (trace.len() >= 2)
            .then(|| monotonicity_report(trace, Slack::default()).ok())
            .flatten(),
        min_improvement_fraction: trace
            .records
            .iter()
            .map(|r| r.improvement_fraction)
            .fold(1.0, f64::min),
        grid_sweeps: oracles.grid.as_ref().map(|g| g.sweeps),
        grid_monotone: oracles.grid.as_ref().map(|g| g.is_monotone(1e-9)),
        theory,
        wall_times,
        total_wall_time: total,
    }
}

fn persist(cfg: &RunConfig, trace: &IterationTrace, summary: Option<&Summary>) -> Result<()> {
    let Some(dir) = &cfg.outdir else {
        return Ok(());
    };
    std::fs::create_dir_all(dir)?;
    trace.save_csv(dir.join("trace.csv"))?;
    trace.save_probe_csv(dir.join("probe_values.csv"))?;
    if let Some(s) = summary {
        let json = serde_json::to_string_pretty(s).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("summary.json"), json)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub grid_l2_gap: Option<f64>,
    pub grid_rel_gap: Option<f64>,
    pub riccati_l2_gap: Option<f64>,
    pub riccati_rel_gap: Option<f64>,
    pub riccati_inactive_fraction: Option<f64>,
    /// Mean absolute difference between the greedy and Riccati controls on
    /// the inactive region, divided by the Riccati control's range there.
    pub policy_rel_error: Option<f64>,
    pub gap_series: Vec<f64>,
    pub rate_fit: Option<RateFit>,
}

/// Compare a value net against whichever oracles the problem admits.
pub fn compare_net(cfg: &RunConfig, problem: &ControlProblem, net: &ValueNet, oracles: &Oracles) -> Result<OracleReport> {
    if oracles.is_empty() {
        return Err(Error::UnsupportedComparison(problem.name().to_string()));
    }
    let d = problem.state_dim();
    let m = problem.action_dim();
    let values = net.eval_batch(&oracles.points, None, Outputs::Value).values;
    let grid = oracles.grid_gap(&values);
    let ric = oracles.riccati_gap(&values);
    let policy_rel_error = match &oracles.riccati {
        Some(r) if !oracles.inactive.is_empty() => {
            let pts: Vec<f64> = oracles
                .inactive
                .iter()
                .flat_map(|&i| oracles.points[i * d..(i + 1) * d].to_vec())
                .collect();
            let greedy = PolicyHandle::greedy(Arc::new(net.clone()), GreedyConfig::default());
            let acts = greedy.act_batch(problem, &pts);
            let exact: Vec<f64> = pts.chunks_exact(d).flat_map(|x| r.control(x)).collect();
            let mut err = 0.0;
            let mut range: f64 = 0.0;
            for j in 0..m {
                let col: Vec<f64> = exact.iter().skip(j).step_by(m).cloned().collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                range = range.max(hi - lo);
            }
            for (a, b) in acts.iter().zip(&exact) {
                err += (a - b).abs();
            }
            Some(err / acts.len() as f64 / range.max(1e-300))
        }
        _ => None,
    };
    let _ = cfg;
    Ok(OracleReport {
        grid_l2_gap: grid.map(|g| g.0),
        grid_rel_gap: grid.map(|g| g.1),
        riccati_l2_gap: ric.map(|g| g.0),
        riccati_rel_gap: ric.map(|g| g.1),
        riccati_inactive_fraction: oracles.riccati.as_ref().map(|_| oracles.inactive_fraction()),
        policy_rel_error,
        gap_series: Vec::new(),
        rate_fit: None,
    })
}

/// Run the configured solve and report the final net against the oracles,
/// with the per-iteration gap series and its rate fit.
pub fn compare_oracle(cfg: &RunConfig) -> Result<OracleReport> {
    let problem = cfg.build_problem()?;
    let has_oracle = (cfg.oracle.riccati && cfg.problem.lqr_matrices(cfg.seed).is_some()) || (cfg.oracle.grid && problem.state_dim() <= 2);
    if !has_oracle {
        return Err(Error::UnsupportedComparison(problem.name().to_string()));
    }
    let out = run_pinn_pi_full(cfg)?;
    with_threads(cfg.threads, || {
        let mut report = compare_net(cfg, &out.problem, &out.net, &out.oracles)?;
        report.gap_series = out.summary.gap_series.clone();
        report.rate_fit = out.summary.rate_fit;
        Ok(report)
    })?
}

/// Compare a checkpoint against the oracles of the problem it references.
pub fn compare_checkpoint(cfg: &RunConfig, net: &ValueNet) -> Result<OracleReport> {
    cfg.validate()?;
    let problem = cfg.build_problem()?;
    if net.input_dim() != problem.state_dim() {
        return Err(Error::Config("checkpoint dimension does not match the problem".into()));
    }
    with_threads(cfg.threads, || {
        let oracles = Oracles::build(cfg, &problem)?;
        compare_net(cfg, &problem, net, &oracles)
    })?
}
