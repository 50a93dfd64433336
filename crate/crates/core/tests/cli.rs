use std::path::Path;
use std::process::{Command, Output};

use pinn_pi::driver::RunConfig;
use pinn_pi::net::{load_checkpoint, Outputs};

const SMALL: &str = r#"
seed = 3
threads = 1
[problem]
name = "scalar_lqr"
u_max = 1.0
[network]
hidden = [8]
[evaluate]
steps = 150
n_collocation = 64
probe_size = 1000
[outer]
max_outer = 2
probe_points = 32
[oracle]
grid_nodes = 41
compare_points = 1000
[sim]
rollouts = 0
"#;

fn pinn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pinn-pi")).args(args).output().unwrap()
}

fn stdout_value(out: &Output, key: &str) -> Option<String> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_string))
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let out = pinn(&["solve", "--problem", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    let out = pinn(&["solve", "--set", "outer.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));

    let out = pinn(&["solve", "--set", "oracle.compare_points=10"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compare_without_oracle_exits_with_code_4() {
    let out = pinn(&["compare-oracle", "--problem", "cartpole"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn validate_assumptions_reports_constants() {
    let out = pinn(&["validate-assumptions", "--problem", "constant", "--samples", "2000"]);
    assert!(out.status.success());
    assert_eq!(stdout_value(&out, "a2_holds").as_deref(), Some("true"));
    let nu: f64 = stdout_value(&out, "nu").unwrap().parse().unwrap();
    assert!(nu > 0.0);

    // unstable open-loop drift: the margin is reported, not turned into an error
    let out = pinn(&["validate-assumptions", "--problem", "scalar_lqr", "--samples", "2000"]);
    assert!(out.status.success());
    assert_eq!(stdout_value(&out, "a2_holds").as_deref(), Some("false"));
    let margin: f64 = stdout_value(&out, "lambda_margin").unwrap().parse().unwrap();
    assert!(margin < 0.0);
}

#[test]
fn grid_solve_writes_solution() {
    let dir = tempfile::tempdir().unwrap();
    let out = pinn(&[
        "grid-solve",
        "--problem",
        "scalar_lqr",
        "--set",
        "oracle.grid_nodes=61",
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_value(&out, "monotone").as_deref(), Some("true"));
    assert!(dir.path().join("grid.txt").exists());
}

#[test]
fn checkpoint_reload_reproduces_probe_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path());
    let run = dir.path().join("run");
    let out = pinn(&["solve", "-c", &cfg_path, "-o", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let iterations: usize = stdout_value(&out, "iterations").unwrap().parse().unwrap();
    assert!(iterations >= 1);
    for f in ["trace.csv", "probe_values.csv", "summary.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let last = iterations - 1;
    let ck = load_checkpoint(run.join(format!("ckpt_{last}"))).unwrap();
    let cfg = RunConfig::from_toml(SMALL).unwrap();
    let problem = cfg.build_problem().unwrap();
    let probe = problem.domain().halton(cfg.outer.probe_points);
    let values = ck.net.eval_batch(&probe, None, Outputs::Value).values;

    let csv = std::fs::read_to_string(run.join("probe_values.csv")).unwrap();
    let row = csv.lines().nth(1 + last).unwrap();
    let saved: Vec<f64> = row.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(saved.len(), values.len());
    for (a, b) in saved.iter().zip(&values) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }

    // the checkpoint carries its problem, so no config is needed to compare it
    let cmp = dir.path().join("cmp");
    let out = pinn(&[
        "compare-oracle",
        "--checkpoint",
        run.join(format!("ckpt_{last}")).to_str().unwrap(),
        "--set",
        "oracle.grid_nodes=41",
        "--set",
        "oracle.compare_points=1000",
        "-o",
        cmp.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let gap: f64 = stdout_value(&out, "grid_rel_gap").unwrap().parse().unwrap();
    assert!(gap.is_finite() && gap >= 0.0);
    assert!(cmp.join("compare.json").exists());

    let out = pinn(&[
        "rollout-eval",
        "--checkpoint",
        run.join(format!("ckpt_{last}")).to_str().unwrap(),
        "--x0=-0.5",
        "--set",
        "sim.rollouts=4",
        "--set",
        "sim.horizon=1.0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mean: f64 = stdout_value(&out, "mean_return").unwrap().parse().unwrap();
    assert!(mean.is_finite());
}
