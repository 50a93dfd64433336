use std::ffi::{CStr, CString};
use std::ptr;

use pinn_pi_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pinnpi_last_error()) }.to_string_lossy().into_owned()
}

fn problem(toml: &str) -> *mut PinnProblem {
    let text = CString::new(toml).unwrap();
    let mut p = ptr::null_mut();
    let st = unsafe { pinnpi_problem_new(text.as_ptr(), 0, &mut p) };
    assert_eq!(st, PinnStatus::Ok, "{}", last_error());
    p
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(pinnpi_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn problem_dimensions_and_errors() {
    let p = problem("name = \"lqr\"\nd = 3\nm = 2\nseed = 4");
    unsafe {
        assert_eq!(pinnpi_problem_state_dim(p), 3);
        assert_eq!(pinnpi_problem_action_dim(p), 2);
        assert_eq!(pinnpi_problem_state_dim(ptr::null()), 0);
        pinnpi_problem_free(p);
        pinnpi_problem_free(ptr::null_mut());
    }

    let bad = CString::new("name = \"nope\"").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { pinnpi_problem_new(bad.as_ptr(), 0, &mut out) }, PinnStatus::Config);
    assert!(last_error().contains("nope"));
    assert!(out.is_null());
    assert_eq!(unsafe { pinnpi_problem_new(ptr::null(), 0, &mut out) }, PinnStatus::NullPointer);
}

#[test]
fn greedy_action_matches_closed_form_in_one_dimension() {
    // a* = clamp(z b / (2 r)) with b = r = 1
    let p = problem("name = \"scalar_lqr\"\nu_max = 1.0");
    let mut a = [0.0];
    for (z, want) in [(0.5, 0.25), (-1.0, -0.5), (4.0, 1.0)] {
        let st = unsafe { pinnpi_greedy_action(p, [0.3].as_ptr(), [z].as_ptr(), 1, a.as_mut_ptr(), 1) };
        assert_eq!(st, PinnStatus::Ok);
        assert!((a[0] - want).abs() < 1e-12, "z={z}: {}", a[0]);
    }
    let st = unsafe { pinnpi_greedy_action(p, [0.3].as_ptr(), [0.1].as_ptr(), 2, a.as_mut_ptr(), 1) };
    assert_eq!(st, PinnStatus::InvalidArgument);
    unsafe { pinnpi_problem_free(p) };
}

#[test]
fn riccati_scalar_solution() {
    let p = problem("name = \"scalar_lqr\"\nlambda = 2.0\nsigma = 0.1");
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { pinnpi_riccati_new(p, &mut r) }, PinnStatus::Ok, "{}", last_error());
    let (mut pm, mut c) = (0.0, 0.0);
    assert_eq!(unsafe { pinnpi_riccati_matrix(r, &mut pm, 1, &mut c) }, PinnStatus::Ok);
    let want = 2f64.sqrt() - 1.0;
    assert!((pm - want).abs() < 1e-12);
    assert!((c + 0.01 * want / 2.0).abs() < 1e-14);
    let mut v = 0.0;
    assert_eq!(unsafe { pinnpi_riccati_value(r, [2.0].as_ptr(), 1, &mut v) }, PinnStatus::Ok);
    assert!((v - (-4.0 * want + c)).abs() < 1e-12);
    unsafe {
        pinnpi_riccati_free(r);
        pinnpi_problem_free(p);
    }

    let pend = problem("name = \"pendulum\"");
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { pinnpi_riccati_new(pend, &mut r) }, PinnStatus::Unsupported);
    unsafe { pinnpi_problem_free(pend) };
}

#[test]
fn solve_save_load_and_evaluate() {
    let cfg = CString::new(
        r#"
        [problem]
        name = "constant"
        d = 1
        [network]
        hidden = [8]
        [evaluate]
        steps = 200
        n_collocation = 64
        probe_size = 1000
        [outer]
        max_outer = 2
        [oracle]
        grid_nodes = 21
        compare_points = 1000
        [sim]
        rollouts = 0
        "#,
    )
    .unwrap();
    let mut net = ptr::null_mut();
    let mut iters = 0usize;
    let st = unsafe { pinnpi_solve(cfg.as_ptr(), &mut net, &mut iters) };
    assert_eq!(st, PinnStatus::Ok, "{}", last_error());
    assert!((1..=2).contains(&iters));
    assert_eq!(unsafe { pinnpi_net_input_dim(net) }, 1);

    let p = problem("name = \"constant\"\nd = 1");
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("net.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { pinnpi_net_save(net, p, path.as_ptr()) }, PinnStatus::Ok);

    let mut back = ptr::null_mut();
    let mut bp = ptr::null_mut();
    assert_eq!(unsafe { pinnpi_net_load(path.as_ptr(), &mut back, &mut bp) }, PinnStatus::Ok);
    assert!(!bp.is_null());
    let x = [0.37];
    let (mut v1, mut v2, mut g, mut t) = (0.0, 0.0, [0.0], 0.0);
    unsafe {
        assert_eq!(pinnpi_net_eval(net, p, x.as_ptr(), 1, &mut v1, ptr::null_mut(), ptr::null_mut()), PinnStatus::Ok);
        assert_eq!(pinnpi_net_eval(back, bp, x.as_ptr(), 1, &mut v2, g.as_mut_ptr(), &mut t), PinnStatus::Ok);
    }
    assert_eq!(v1, v2);
    assert!(g[0].is_finite() && t.is_finite());

    // residual λv - ½σ²v'' - 1 with zero drift
    let mut res = 0.0;
    let st = unsafe { pinnpi_net_residual(back, bp, x.as_ptr(), 1, [0.0].as_ptr(), 1, &mut res) };
    assert_eq!(st, PinnStatus::Ok);
    assert!((res - (v2 - 0.5 * t - 1.0)).abs() < 1e-12);

    let missing = CString::new(dir.path().join("absent").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { pinnpi_net_load(missing.as_ptr(), &mut none, ptr::null_mut()) }, PinnStatus::Io);
    unsafe {
        pinnpi_net_free(net);
        pinnpi_net_free(back);
        pinnpi_problem_free(p);
        pinnpi_problem_free(bp);
    }
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/pinn_pi.h")).unwrap();
    for f in [
        "pinnpi_last_error",
        "pinnpi_version",
        "pinnpi_problem_new",
        "pinnpi_problem_free",
        "pinnpi_greedy_action",
        "pinnpi_riccati_new",
        "pinnpi_riccati_matrix",
        "pinnpi_net_load",
        "pinnpi_net_save",
        "pinnpi_net_eval",
        "pinnpi_net_residual",
        "pinnpi_solve",
        "PINN_STATUS_NULL_POINTER",
    ] {
        assert!(header.contains(f), "{f}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, "#include \"pinn_pi.h\"\nint main(void) { return pinnpi_version() == 0; }\n").unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
