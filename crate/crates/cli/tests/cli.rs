use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], config: &str, dir: &Path) -> Output {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_stochbarrier"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

/// Data rows of a CSV written by the binary, without the header comment.
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("# stochbarrier "));
    assert!(!text.contains('\r'));
    text.lines().skip(2).map(|l| l.split(',').map(String::from).collect()).collect()
}

const BOUND: &str = r#"
[bound]
m = 1.0
alpha = 0.99
delta = 0.0
gamma = 0.0
h0 = 1.0
horizon = 10

[sweep]
gamma = [0.0, 0.5]
horizon = [10, 100]
"#;

#[test]
fn bound_grid_is_monotone() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["bound"], BOUND, tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = rows(&tmp.path().join("out/bound.csv"));
    assert_eq!(rows.len(), 4);
    let p = |gamma: &str, k: &str| -> f64 {
        rows.iter().find(|r| r[3] == gamma && r[5] == k).unwrap()[8].parse().unwrap()
    };
    assert!(p("0.5", "10") <= p("0", "10"));
    assert!(p("0", "100") >= p("0", "10"));
    // Case 2 with delta = 0, gamma = 0, h0 = M: 1 - alpha^K.
    assert!((p("0", "10") - (1.0 - 0.99f64.powi(10))).abs() < 1e-12);
}

const SIMULATE: &str = r#"
[system]
kind = "linear_1d"
sigma = 0.0

[barrier]
kind = "interval"

[[controllers]]
id = "jed"
mode = "jed"
alpha = 0.9
c_j = 0.0

[[controllers]]
id = "jed_copy"
mode = "jed"
alpha = 0.9
c_j = 0.0

[trials]
x0 = [0.0]
horizon = 20
n_trials = 50
seed = 1
"#;

#[test]
fn zero_noise_simulation_is_sound_and_never_exits() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--certify", "--trajectories"], SIMULATE, tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = rows(&tmp.path().join("out/summary.csv"));
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r[2], "0");
        assert_eq!(r[6], "true");
    }
    let traj = self::rows(&tmp.path().join("out/trajectories_jed.csv"));
    assert_eq!(traj.len(), 50 * 21);
    assert!(tmp.path().join("out/resolved_config.toml").exists());
}

#[test]
fn identical_controllers_compare_equal() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SIMULATE.replace("sigma = 0.0", "sigma = 0.3");
    let out = run(&["compare"], &cfg, tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = rows(&tmp.path().join("out/compare.csv"));
    assert_eq!(rows.len(), 21);
    assert_eq!(rows[0][1], "1");
    for r in &rows {
        assert_eq!(r[1], r[2]);
    }
}

#[test]
fn config_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = format!("{SIMULATE}\n[extra]\nkey = 1\n");
    assert_eq!(run(&["simulate"], &unknown, tmp.path()).status.code(), Some(2));
    let bad_alpha = SIMULATE.replacen("alpha = 0.9", "alpha = 1.5", 1);
    assert_eq!(run(&["simulate"], &bad_alpha, tmp.path()).status.code(), Some(2));
    let one_controller = SIMULATE.split("[[controllers]]\nid = \"jed_copy\"").next().unwrap().to_string()
        + "[trials]\nx0 = [0.0]\nhorizon = 5\nn_trials = 5\nseed = 1\n";
    assert_eq!(run(&["compare"], &one_controller, tmp.path()).status.code(), Some(2));
}

#[test]
fn certify_fails_on_infeasible_filter() {
    let tmp = tempfile::tempdir().unwrap();
    // A state far outside the interval leaves no input that restores the constraint.
    let cfg = SIMULATE
        .replace("kind = \"interval\"", "kind = \"quadratic\"\np = [[1.0]]\noffset = 1.0")
        .replace("mode = \"jed\"\nalpha = 0.9\nc_j = 0.0", "mode = \"jed\"\nalpha = 0.9\nc_j = 5.0")
        .replace("sigma = 0.0", "sigma = 0.1");
    let out = run(&["simulate", "--certify"], &cfg, tmp.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
