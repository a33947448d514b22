use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rcl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The shipped T1 config, copied next to the test.
fn t1_file(dir: &Path) -> String {
    let src = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/configs/t1.ini");
    let dst = dir.join("t1.ini");
    fs::copy(src, &dst).unwrap();
    dst.to_string_lossy().into_owned()
}

#[test]
fn solve_t1_prints_summary_and_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = t1_file(dir.path());
    let o = rcl(&["solve", &cfg, "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.starts_with("Dstar=0.2"), "{line}");
    assert!(line.contains("Phat=0.5 "), "{line}");
    assert!(line.trim_end().ends_with("slater=true"), "{line}");
    let csv = fs::read_to_string(dir.path().join("run/dual.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iter,lambda_1,q,best_feasible,gap"));
    assert_eq!(lines.count(), 500);
}

#[test]
fn solve_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = rcl(&["solve", "bundled:cvar-demo", "--seed", "7", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("a/dual.csv")).unwrap();
    let b = fs::read(dir.path().join("b/dual.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_thresholds_is_a_positioned_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = t1_file(dir.path());
    let text = fs::read_to_string(&cfg).unwrap();
    let start = text.find("[thresholds]").unwrap();
    let end = start + text[start..].find("\n\n").unwrap_or(text.len() - start);
    let broken = dir.path().join("broken.ini");
    fs::write(&broken, format!("{}{}", &text[..start], &text[end..])).unwrap();
    let o = rcl(&["solve", broken.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("broken.ini:"), "{err}");
    assert!(err.contains("thresholds"), "{err}");
    let pos = err.split("broken.ini:").nth(1).unwrap();
    let mut parts = pos.split(':');
    assert!(parts.next().unwrap().parse::<usize>().is_ok(), "{err}");
    assert!(parts.next().unwrap().parse::<usize>().is_ok(), "{err}");
}

#[test]
fn infeasible_solve_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = t1_file(dir.path());
    let text = fs::read_to_string(&cfg).unwrap().replace("c1 = 0.25", "c1 = -0.5");
    fs::write(&cfg, text).unwrap();
    let o = rcl(&["solve", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stdout(&o).contains("Phat=none"));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn oracle_reports_t1_references() {
    let dir = tempfile::tempdir().unwrap();
    let o = rcl(&["oracle", "bundled:t1"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.starts_with("n=2 Pstar=0.5 Dstar=0.2"), "{line}");
    assert!(line.contains("rel_gap=0.5"), "{line}");
    let csv = fs::read_to_string(dir.path().join("oracle.csv")).unwrap();
    assert!(csv.starts_with("n,Pstar,Dstar,mixed,rel_gap\n2,0.5,"));
}

#[test]
fn sweep_writes_one_row_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let o = rcl(&["sweep", "bundled:lyapunov-family", "--levels", "2,4,8", "--jobs", "2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(stdout(&o), csv);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "n,Pstar,Dstar,mixed,rel_gap");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("2,0.5,"));
    assert!(rows[1].ends_with(",0.5"), "{}", rows[1]);
    let gaps: Vec<f64> = rows[1..].iter().map(|r| r.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(gaps.windows(2).all(|w| w[1] <= w[0] + 0.02));
}

#[test]
fn sweep_needs_a_density_base() {
    let dir = tempfile::tempdir().unwrap();
    let o = rcl(&["sweep", "bundled:t1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn axioms_verb_lists_violations() {
    let dir = tempfile::tempdir().unwrap();
    let o = rcl(
        &["axioms", "cvar:0.3", "gmsd:square-relu:1:1", "--trials", "200", "--out", "."],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "spec,coherent,trials,convexity,homogeneity,monotonicity,translation");
    assert!(rows[1].starts_with("cvar:0.3,true,200,"));
    assert!(rows[2].contains(",false,200,"));
    assert!(rows[2].ends_with(",,"), "non-coherent rows leave the coherent-only columns empty: {}", rows[2]);
    assert_eq!(fs::read_to_string(dir.path().join("axioms.csv")).unwrap(), out);
}

#[test]
fn unknown_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rcl(&["solve", "bundled:nope"], dir.path()).status.code(), Some(1));
    assert_eq!(rcl(&["solve", "missing.ini"], dir.path()).status.code(), Some(1));
    assert_eq!(rcl(&["axioms", "cvar:2"], dir.path()).status.code(), Some(1));
}
