use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn instance(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "instances", name]
        .iter()
        .collect()
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_switchgrad"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn validate(name: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_switchgrad"))
        .arg("validate")
        .arg(name)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_distinguishes_bad_models_from_bad_files() {
    let ok = validate(instance("benchmark1d.cfg").to_str().unwrap());
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let looped = validate(instance("zero_loop.cfg").to_str().unwrap());
    assert_eq!(code(&looped), 1);
    assert!(String::from_utf8_lossy(&looped.stdout).contains("1->2->1"));
    assert_eq!(
        code(&validate(instance("malformed.cfg").to_str().unwrap())),
        2
    );
    assert_eq!(code(&validate("does/not/exist.cfg")), 2);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let bench = instance("benchmark1d.cfg");
    let small = run(
        &["solve", bench.to_str().unwrap(), "--grid", "3"],
        dir.path(),
    );
    assert_eq!(code(&small), 2);
    let eps = run(
        &["solve", bench.to_str().unwrap(), "--eps", "0"],
        dir.path(),
    );
    assert_eq!(code(&eps), 2);
    let order = run(
        &["limit", bench.to_str().unwrap(), "--epsilons", "0.05,0.1"],
        dir.path(),
    );
    assert_eq!(code(&order), 2);
}

#[test]
fn simulate_without_a_limit_names_the_missing_step() {
    let dir = TempDir::new().unwrap();
    let o = run(
        &[
            "simulate",
            instance("benchmark1d.cfg").to_str().unwrap(),
            "--paths",
            "10",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(
        msg.contains("u_eps.json") && msg.contains("switchgrad limit"),
        "{msg}"
    );
}

#[test]
fn stalled_continuation_keeps_partial_results() {
    let dir = TempDir::new().unwrap();
    let o = run(
        &[
            "limit",
            instance("switching1d.cfg").to_str().unwrap(),
            "--deltas",
            "0.5,0.45,0.4,0.35,0.3",
            "--epsilons",
            "0.1",
            "--no-exact-switching",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(dir.path().join("convergence.partial.csv").exists());
    assert!(dir.path().join("field.partial.json").exists());
    assert!(!dir.path().join("u_eps.json").exists());
}

#[test]
fn full_pipeline_is_repeatable_and_exportable() {
    let dir = TempDir::new().unwrap();
    let inst = instance("switching1d.cfg");
    let inst = inst.to_str().unwrap();

    let first = run(&["solve", inst], dir.path());
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let field = fs::read(dir.path().join("field.json")).unwrap();
    let again = run(&["solve", inst], dir.path());
    assert_eq!(code(&again), 0);
    assert_eq!(field, fs::read(dir.path().join("field.json")).unwrap());

    let lim = run(&["limit", inst], dir.path());
    assert_eq!(code(&lim), 0, "{}", stderr(&lim));
    for name in [
        "u_eps.json",
        "convergence.csv",
        "hjb_report.json",
        "regions.json",
        "regions.csv",
        "manifest.limit.json",
    ] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let regions = fs::read_to_string(dir.path().join("regions.csv")).unwrap();
    assert!(regions.contains("SWITCH"));

    let few = run(
        &["simulate", inst, "--paths", "10", "--dump-paths", "3"],
        dir.path(),
    );
    assert_eq!(code(&few), 0, "{}", stderr(&few));
    assert!(stderr(&few).contains("warning"));
    let paths = fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    assert!(paths.starts_with("path,time,event"));

    fs::remove_file(dir.path().join("field.csv")).unwrap();
    let exp = run(&["export", inst], dir.path());
    assert_eq!(code(&exp), 0, "{}", stderr(&exp));
    assert!(dir.path().join("field.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.export.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "export");
}

fn solve_with_subsolution(dir: &Path, sub: &str) -> (Output, serde_json::Value) {
    let text = fs::read_to_string(instance("benchmark1d.cfg")).unwrap();
    let path = dir.join("with_sub.cfg");
    fs::write(&path, format!("subsolution = {sub}\n{text}")).unwrap();
    let o = run(&["solve", path.to_str().unwrap(), "--grid", "41"], dir);
    let cmp =
        serde_json::from_str(&fs::read_to_string(dir.join("comparison.json")).unwrap()).unwrap();
    (o, cmp)
}

#[test]
fn supplied_subsolution_is_checked() {
    let dir = TempDir::new().unwrap();
    // Equal across regimes and states, slope at most 0.1 < g, and
    // c·w − w'' − h ≤ 0.15 − 0.5 < 0.
    let w = "\"0.05*(1 - x^2)\"";
    let (o, cmp) = solve_with_subsolution(dir.path(), &format!("[[{w}, {w}], [{w}, {w}]]"));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(cmp["passed"], true, "{cmp}");

    // Jumps to the boundary value, so it is not below the solution.
    let (o, cmp) = solve_with_subsolution(dir.path(), "[[0.0, 0.0], [0.0, \"0.1*cos(x)\"]]");
    assert_eq!(code(&o), 0);
    assert_eq!(cmp["passed"], false);
    assert!(stderr(&o).contains("sub-solution"));
}
