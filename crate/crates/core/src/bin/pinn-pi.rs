use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pinn_pi::driver::{seeds, compare_checkpoint, compare_oracle, run_pinn_pi_full, with_threads, OracleReport, RunConfig, Summary};
use pinn_pi::improve::PolicyHandle;
use pinn_pi::net::load_checkpoint;
use pinn_pi::oracle::{grid_howard_pi, GridConfig};
use pinn_pi::problems::validate_assumptions;
use pinn_pi::sim::{default_horizon, estimate_value_mc};
use pinn_pi::{Error, Result};

#[derive(Parser)]
#[command(name = "pinn-pi", version, about = "Physics-informed neural policy iteration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Problem name, shorthand for `--set problem.name=<NAME>`.
    #[arg(long)]
    problem: Option<String>,
    /// Output directory (overrides `outdir`).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Master seed; every module seed is a fixed offset from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. `--threads 1` gives bit-reproducible runs.
    #[arg(long)]
    threads: Option<usize>,
    /// Override any config key, e.g. `--set outer.max_outer=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut ov = Vec::new();
        if let Some(name) = &self.problem {
            ov.push(format!("problem.name={name}"));
        }
        ov.extend(self.overrides.iter().cloned());
        if let Some(s) = self.seed {
            ov.push(format!("seed={s}"));
        }
        if let Some(t) = self.threads {
            ov.push(format!("threads={t}"));
        }
        if let Some(o) = &self.out {
            ov.push(format!("outdir={}", toml_string(o)));
        }
        RunConfig::from_toml_with_overrides(&text, &ov)
    }
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

#[derive(Subcommand)]
enum Command {
    /// Run the outer policy-iteration loop and write trace, checkpoints and summary.
    Solve(Common),
    /// Compare a run (or an existing checkpoint) against the Riccati and grid oracles.
    CompareOracle {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to compare instead of running a solve.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Monte-Carlo discounted return of a checkpoint's greedy policy.
    RolloutEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Start state, comma separated; defaults to the origin.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
    },
    /// Report the empirical assumption constants of the configured problem.
    ValidateAssumptions {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
    /// Solve the HJB equation by Howard policy iteration on a grid (d ≤ 2).
    GridSolve(Common),
}

fn print_kv(pairs: &[(&str, String)]) {
    for (k, v) in pairs {
        println!("{k} = {v}");
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| format!("{x:e}"))
}

fn print_summary(s: &Summary) {
    print_kv(&[
        ("problem", s.problem.clone()),
        ("iterations", s.iterations.to_string()),
        ("converged", s.converged.to_string()),
        ("final_residual_l2", format!("{:e}", s.final_residual_l2)),
        ("final_policy_sup_distance", format!("{:e}", s.final_policy_sup_distance)),
        ("final_grid_l2_gap", opt(s.final_grid_l2_gap)),
        ("final_grid_rel_gap", opt(s.final_grid_rel_gap)),
        ("final_riccati_l2_gap", opt(s.final_riccati_l2_gap)),
        ("final_riccati_rel_gap", opt(s.final_riccati_rel_gap)),
        ("kappa_hat", opt(s.rate_fit.map(|r| r.kappa_hat))),
        ("monotonicity_fraction", opt(s.monotonicity_fraction)),
        ("min_improvement_fraction", format!("{}", s.min_improvement_fraction)),
        ("total_wall_time", format!("{:.3}", s.total_wall_time)),
    ]);
}

fn print_report(r: &OracleReport) {
    print_kv(&[
        ("grid_l2_gap", opt(r.grid_l2_gap)),
        ("grid_rel_gap", opt(r.grid_rel_gap)),
        ("riccati_l2_gap", opt(r.riccati_l2_gap)),
        ("riccati_rel_gap", opt(r.riccati_rel_gap)),
        ("riccati_inactive_fraction", opt(r.riccati_inactive_fraction)),
        ("policy_rel_error", opt(r.policy_rel_error)),
        ("kappa_hat", opt(r.rate_fit.map(|f| f.kappa_hat))),
        ("floor_estimate", opt(r.rate_fit.map(|f| f.floor_estimate))),
        (
            "gap_series",
            r.gap_series.iter().map(|g| format!("{g:e}")).collect::<Vec<_>>().join(","),
        ),
    ]);
}

fn write_json(dir: Option<&Path>, name: &str, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join(name), json)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve(common) => {
            let cfg = common.load()?;
            let out = run_pinn_pi_full(&cfg)?;
            print_summary(&out.summary);
        }
        Command::CompareOracle { common, checkpoint } => {
            let report = match checkpoint {
                Some(path) => {
                    let ck = load_checkpoint(&path)?;
                    let mut cfg = common.load_or_checkpoint(ck.problem.as_ref())?;
                    cfg.outdir = common.out.clone().or(cfg.outdir);
                    compare_checkpoint(&cfg, &ck.net)?
                }
                None => compare_oracle(&common.load()?)?,
            };
            print_report(&report);
            let cfg_out = common.out.as_deref();
            write_json(cfg_out, "compare.json", &report)?;
        }
        Command::RolloutEval { common, checkpoint, x0 } => {
            let (policy, problem, cfg) = match checkpoint {
                Some(path) => {
                    let (policy, problem) = PolicyHandle::from_checkpoint(&path)?;
                    let ck = load_checkpoint(&path)?;
                    let cfg = common.load_or_checkpoint(ck.problem.as_ref())?;
                    (policy, problem, cfg)
                }
                None => {
                    let cfg = common.load()?;
                    let problem = cfg.build_problem()?;
                    (PolicyHandle::box_center(&problem), problem, cfg)
                }
            };
            let x0 = x0.unwrap_or_else(|| vec![0.0; problem.state_dim()]);
            if x0.len() != problem.state_dim() {
                return Err(Error::Config(format!(
                    "--x0 has {} entries, the problem has dimension {}",
                    x0.len(),
                    problem.state_dim()
                )));
            }
            let horizon = cfg.sim.horizon.unwrap_or_else(|| default_horizon(&problem));
            let n = cfg.sim.rollouts.max(2);
            let est = with_threads(cfg.threads, || {
                estimate_value_mc(&problem, &policy, &x0, n, horizon, cfg.sim.dt, cfg.seed + seeds::ROLLOUTS)
            })??;
            print_kv(&[
                ("policy", policy.label().to_string()),
                ("mean_return", format!("{:e}", est.mean)),
                ("stderr", format!("{:e}", est.stderr)),
                ("rollouts", est.n_rollouts.to_string()),
                ("blown_up", est.blown_up.to_string()),
            ]);
        }
        Command::ValidateAssumptions { common, samples } => {
            let cfg = common.load()?;
            let problem = cfg.build_problem()?;
            let tc = with_threads(cfg.threads, || validate_assumptions(&problem, samples, cfg.seed + seeds::ASSUMPTIONS))??;
            print_kv(&[
                ("b_hat", format!("{:e}", tc.b_hat)),
                ("nu", format!("{:e}", tc.nu)),
                ("lambda_max", format!("{:e}", tc.lambda_max)),
                ("mu_a", format!("{:e}", tc.mu_a)),
                ("l_a", format!("{:e}", tc.l_a)),
                ("b_tilde", format!("{:e}", tc.b_tilde)),
                ("lambda_margin", format!("{:e}", tc.lambda_margin)),
                ("c_lambda", opt(tc.c_lambda)),
                ("theta", opt(tc.theta)),
                ("kappa_tilde_bound", opt(tc.kappa_tilde_bound)),
                ("a2_holds", tc.a2_holds().to_string()),
            ]);
            write_json(cfg.outdir.as_deref(), "assumptions.json", &tc)?;
        }
        Command::GridSolve(common) => {
            let cfg = common.load()?;
            let problem = cfg.build_problem()?;
            let gcfg = GridConfig {
                nodes: cfg.oracle.grid_nodes,
                margin: cfg.oracle.grid_margin,
                ..Default::default()
            };
            let sol = with_threads(cfg.threads, || grid_howard_pi(&problem, &gcfg, None))??;
            if let Some(dir) = &cfg.outdir {
                std::fs::create_dir_all(dir)?;
                sol.save(dir.join("grid.txt"))?;
            }
            print_kv(&[
                ("nodes", sol.spec.len().to_string()),
                ("sweeps", sol.sweeps.to_string()),
                ("converged", sol.converged.to_string()),
                ("monotone", sol.is_monotone(1e-9).to_string()),
                ("worst_decrease", format!("{:e}", sol.worst_decrease)),
                ("refined", sol.refined.to_string()),
            ]);
        }
    }
    Ok(())
}

impl Common {
    /// Config from `--config`/flags, falling back to the problem a checkpoint references.
    fn load_or_checkpoint(&self, pref: Option<&pinn_pi::net::ProblemRef>) -> Result<RunConfig> {
        if self.config.is_some() || self.problem.is_some() || pref.is_none() {
            return self.load();
        }
        let pref = pref.expect("checked above");
        let mut table = toml::Table::new();
        table.insert("seed".into(), toml::Value::Integer(pref.seed as i64));
        let problem = toml::Value::try_from(&pref.problem).map_err(|e| Error::Format(e.to_string()))?;
        table.insert("problem".into(), problem);
        let base = toml::to_string(&table).map_err(|e| Error::Format(e.to_string()))?;
        let mut ov = self.overrides.clone();
        if let Some(s) = self.seed {
            ov.push(format!("seed={s}"));
        }
        if let Some(t) = self.threads {
            ov.push(format!("threads={t}"));
        }
        RunConfig::from_toml_with_overrides(&base, &ov)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
