//! Policy evaluation: fit the value net to the frozen-policy linear PDE by
//! minimizing the mean squared residual over collocation points.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::domain::seeded_rng;
use crate::error::{Error, Result};
use crate::improve::PolicyHandle;
use crate::net::{residuals_frozen, FrozenBatch, ValueNet};
use crate::optim::{Adam, CosineSchedule};
use crate::problems::ControlProblem;

/// Stream ids keeping the training and probe samplers apart.
const TRAIN_STREAM: u64 = 0x7a;
const PROBE_STREAM: u64 = 0x9b;

#[derive(Debug, Clone, PartialEq)]
pub struct CollocationBatch {
    /// Row-major `N × d`.
    pub points: Vec<f64>,
    /// Row-major `N × m`.
    pub actions: Vec<f64>,
    pub seed: u64,
}

/// `n` i.i.d. uniform points on Ω with the policy's actions.
pub fn sample_collocation(problem: &ControlProblem, policy: &PolicyHandle, n: usize, seed: u64) -> Result<CollocationBatch> {
    sample_stream(problem, policy, n, seed, TRAIN_STREAM)
}

fn sample_stream(problem: &ControlProblem, policy: &PolicyHandle, n: usize, seed: u64, stream: u64) -> Result<CollocationBatch> {
    if n == 0 {
        return Err(Error::Config("collocation batch size must be positive".into()));
    }
    let points = problem.domain().sample_uniform(n, &mut seeded_rng(seed, stream));
    let actions = policy.act_batch(problem, &points);
    Ok(CollocationBatch { points, actions, seed })
}

fn freeze(problem: &ControlProblem, batch: CollocationBatch) -> FrozenBatch {
    FrozenBatch::new(problem, batch.points, &batch.actions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Collocation points per batch.
    pub n_collocation: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_min: f64,
    /// Residual L² target; `None` means `1e-2·sqrt(vol Ω)`.
    pub p_target: Option<f64>,
    /// Draw a fresh batch every this many steps; 0 keeps one batch.
    pub resample_every: usize,
    /// Probe-residual cadence in steps.
    pub check_every: usize,
    pub probe_size: usize,
    /// Derived from the run seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_collocation: 2048,
            steps: 5000,
            lr: 1e-3,
            lr_min: 1e-4,
            p_target: None,
            resample_every: 200,
            check_every: 100,
            probe_size: 8192,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("evaluate: {m}")));
        if self.n_collocation == 0 {
            return bad("n_collocation must be positive");
        }
        if !(self.lr > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr) {
            return bad("need 0 < lr_min ≤ lr");
        }
        if self.check_every == 0 {
            return bad("check_every must be positive");
        }
        if self.probe_size < 1000 {
            return bad("probe_size must be at least 1000");
        }
        if let Some(p) = self.p_target {
            if !(p > 0.0) {
                return bad("p_target must be positive");
            }
        }
        Ok(())
    }

    pub fn p_target_for(&self, problem: &ControlProblem) -> f64 {
        self.p_target
            .unwrap_or_else(|| 1e-2 * problem.domain().volume().sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub residual_l2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub residual_l2_estimate: f64,
    pub steps_taken: usize,
    pub wall_time: f64,
    pub tolerance_met: bool,
    pub p_target: f64,
    pub curve: Vec<CurvePoint>,
}

impl TrainReport {
    /// `step,loss,residual_l2` rows; the residual column is empty off the
    /// probe cadence.
    pub fn write_curve_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "step,loss,residual_l2")?;
        for c in &self.curve {
            match c.residual_l2 {
                Some(r) => writeln!(w, "{},{:e},{:e}", c.step, c.loss, r)?,
                None => writeln!(w, "{},{:e},", c.step, c.loss)?,
            }
        }
        Ok(())
    }

    pub fn save_curve_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_curve_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// `sqrt(vol Ω · mean r²)` over a frozen probe batch.
pub fn residual_l2_on(net: &ValueNet, problem: &ControlProblem, probe: &FrozenBatch) -> f64 {
    let r = residuals_frozen(net, probe, problem.sigma_sq(), problem.lambda());
    let ms = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
    (problem.domain().volume() * ms).sqrt()
}

/// Monte-Carlo estimate of the residual's L² norm over Ω from `m` fresh
/// uniform points.
pub fn residual_l2(net: &ValueNet, problem: &ControlProblem, policy: &PolicyHandle, m: usize, seed: u64) -> Result<f64> {
    if m < 1000 {
        return Err(Error::Config("residual_l2 needs at least 1000 points".into()));
    }
    let probe = freeze(problem, sample_stream(problem, policy, m, seed, PROBE_STREAM)?);
    Ok(residual_l2_on(net, problem, &probe))
}

/// Train `net` in place by Adam on the residual loss of `policy`.
///
/// Stops early once the probe residual estimate reaches the target; the
/// probe set is drawn from a stream disjoint from the collocation batches.
pub fn policy_evaluation_train(
    net: &mut ValueNet,
    problem: &ControlProblem,
    policy: &PolicyHandle,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let p_target = cfg.p_target_for(problem);
    let sigma_sq = problem.sigma_sq();
    let lambda = problem.lambda();

    let probe = freeze(problem, sample_stream(problem, policy, cfg.probe_size, cfg.seed, PROBE_STREAM)?);
    let draw = |k: u64| -> Result<FrozenBatch> {
        let pts = problem
            .domain()
            .sample_uniform(cfg.n_collocation, &mut seeded_rng(cfg.seed, TRAIN_STREAM + (k << 8)));
        let actions = policy.act_batch(problem, &pts);
        Ok(FrozenBatch::new(problem, pts, &actions))
    };
    let mut batch = draw(0)?;

    let schedule = CosineSchedule {
        lr_max: cfg.lr,
        lr_min: cfg.lr_min,
        total_steps: cfg.steps,
    };
    let mut adam = Adam::new(net.n_params());
    let mut curve = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut residual = f64::INFINITY;
    let mut over = 0usize;
    let mut step = 0;
    loop {
        if step > 0 && cfg.resample_every > 0 && step % cfg.resample_every == 0 {
            batch = draw((step / cfg.resample_every) as u64)?;
        }
        let (loss, grad) = net.loss_and_grad_frozen(&batch, sigma_sq, lambda)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {step}")));
        }
        if step == 0 {
            initial_loss = loss;
        }
        let check = step % cfg.check_every == 0 || step == cfg.steps;
        let mut point = CurvePoint {
            step,
            loss,
            residual_l2: None,
        };
        if check {
            residual = residual_l2_on(net, problem, &probe);
            point.residual_l2 = Some(residual);
        }
        curve.push(point);
        if check && residual <= p_target {
            break;
        }
        if loss > 1e6 * initial_loss.max(f64::MIN_POSITIVE) {
            over += 1;
            if over >= 100 {
                return Err(Error::TrainingDiverged {
                    step,
                    loss,
                    trace: Box::default(),
                });
            }
        } else {
            over = 0;
        }
        if step == cfg.steps {
            break;
        }
        adam.step(net.params_mut(), &grad, schedule.at(step));
        step += 1;
    }

    let final_loss = curve.last().map_or(initial_loss, |c| c.loss);
    Ok(TrainReport {
        initial_loss,
        final_loss,
        residual_l2_estimate: residual,
        steps_taken: step,
        wall_time: start.elapsed().as_secs_f64(),
        tolerance_met: residual <= p_target,
        p_target,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::BoxSet;
    use crate::net::Activation;
    use crate::problems::{make_constant_cost, make_constant_cost_with, make_lqr};

    #[test]
    fn collocation_support_mean_and_reproducibility() {
        let p = make_lqr(5, 5, 1, 10.0, 0.1, 1.0).unwrap();
        let pol = PolicyHandle::box_center(&p);
        let b = sample_collocation(&p, &pol, 4096, 9).unwrap();
        assert!(b.points.iter().all(|v| (-3.0..=3.0).contains(v)));
        let tol = 4.0 * (6.0 / 12f64.sqrt()) / 4096f64.sqrt();
        for k in 0..5 {
            let mean: f64 = b.points.iter().skip(k).step_by(5).sum::<f64>() / 4096.0;
            assert!(mean.abs() < tol, "coordinate {k} mean {mean}");
        }
        assert_eq!(b, sample_collocation(&p, &pol, 4096, 9).unwrap());
        assert!(b.actions.iter().all(|a| *a == 0.0));
        assert!(sample_collocation(&p, &pol, 0, 9).is_err());
    }

    fn constant_net(d: usize, value: f64) -> ValueNet {
        let mut net = ValueNet::init(&[d, 8, 1], Activation::Tanh, 0).unwrap();
        net.layer_mut(1).0.fill(0.0);
        net.layer_mut(1).1[0] = value;
        net
    }

    #[test]
    fn residual_l2_examples() {
        let unit = make_constant_cost_with(1.0, 1.0, 1, 0.0, 0.1, BoxSet::new(vec![0.0], vec![1.0]).unwrap()).unwrap();
        let pol = PolicyHandle::box_center(&unit);
        assert!((residual_l2(&constant_net(1, 2.0), &unit, &pol, 2000, 0).unwrap() - 1.0).abs() < 1e-12);
        assert!(residual_l2(&constant_net(1, 1.0), &unit, &pol, 2000, 0).unwrap() < 1e-8);
        assert!(residual_l2(&constant_net(1, 1.0), &unit, &pol, 10, 0).is_err());
    }

    #[test]
    fn warm_start_at_exact_solution_stops_immediately() {
        let p = make_constant_cost(1.0, 1.0, 2).unwrap();
        let pol = PolicyHandle::box_center(&p);
        let mut net = constant_net(2, 1.0);
        let rep = policy_evaluation_train(&mut net, &p, &pol, &TrainConfig::default()).unwrap();
        assert_eq!(rep.steps_taken, 0);
        assert!(rep.tolerance_met);
        assert_eq!(rep.final_loss, 0.0);
    }

    #[test]
    fn cold_start_reduces_loss_and_is_reproducible() {
        let p = make_lqr(2, 2, 0, 10.0, 0.1, 1.0).unwrap();
        let pol = PolicyHandle::box_center(&p);
        let cfg = TrainConfig {
            n_collocation: 256,
            steps: 200,
            lr: 1e-2,
            p_target: Some(1e-9),
            probe_size: 1000,
            check_every: 50,
            resample_every: 50,
            ..Default::default()
        };
        let init = ValueNet::init(&[2, 16, 16, 1], Activation::Tanh, 3).unwrap();
        let mut a = init.clone();
        let ra = policy_evaluation_train(&mut a, &p, &pol, &cfg).unwrap();
        assert!(ra.final_loss < ra.initial_loss);
        assert_eq!(ra.steps_taken, 200);
        assert!(!ra.tolerance_met);
        let mut b = init.clone();
        let rb = policy_evaluation_train(&mut b, &p, &pol, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.curve, rb.curve);
        let mut csv = Vec::new();
        ra.write_curve_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("step,loss,residual_l2\n0,"));
        assert_eq!(text.lines().count(), 202);
    }

    #[test]
    fn tolerance_flag_matches_definition() {
        let p = make_constant_cost(1.0, 1.0, 1).unwrap();
        let pol = PolicyHandle::box_center(&p);
        let mut net = ValueNet::init(&[1, 8, 1], Activation::Tanh, 1).unwrap();
        let cfg = TrainConfig {
            n_collocation: 128,
            steps: 3000,
            lr: 1e-2,
            probe_size: 1000,
            check_every: 25,
            ..Default::default()
        };
        let rep = policy_evaluation_train(&mut net, &p, &pol, &cfg).unwrap();
        assert!(rep.tolerance_met);
        assert!(rep.residual_l2_estimate <= rep.p_target);
        assert!(rep.steps_taken < 3000);
    }

    #[test]
    fn rejects_invalid_config() {
        let cfg = TrainConfig {
            lr_min: 1.0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
