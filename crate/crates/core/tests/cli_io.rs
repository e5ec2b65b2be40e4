mod common;

use std::path::Path;

use common::{configs_dir, desk};
use tumor_control::cli::{run_command, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_OK, EXIT_SOLVER};
use tumor_control::config::{parse_config, parse_config_str};
use tumor_control::io::{read_snapshot, timeseries_csv, time_records, write_snapshot, write_triple, TIMESERIES_COLUMNS};
use tumor_control::*;

const MINIMAL: &str = "\
[grid]
n = 16

[model]
alpha = 0.5
beta = 0.5
t_final = 0.1
nt = 5

[potential]
kind = \"regular\"
";

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["tumor-control"];
    argv.extend_from_slice(args);
    run_command(argv)
}

fn write_cfg(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn shipped_desk_config_is_the_desk_problem() {
    let spec = parse_config(configs_dir().join("desk.cfg")).unwrap();
    let setup = spec.build().unwrap();
    assert_eq!(setup.problem, desk());
    assert_eq!(spec.seed, 42);
}

#[test]
fn config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let custom = format!(
        "{MINIMAL}\n[cost]\nb5 = 0.5\nmu_q = \"cosine:0.1:1 + constant:0.2\"\nsigma_q = \"ramp:0.1:-1:2\"\n\n[optimizer]\nstep_rule = \"fixed\"\n"
    )
    .replace("kind = \"regular\"", "kind = \"custom\"\nbhat = [0.0, 0.0, 0.5, 0.0, 0.25]\npihat = [0.0, 0.0, -1.0]");
    for text in [
        std::fs::read_to_string(configs_dir().join("desk.cfg")).unwrap(),
        std::fs::read_to_string(configs_dir().join("manufactured.cfg")).unwrap(),
        MINIMAL.to_string(),
        custom,
    ] {
        let spec = parse_config_str(&text, dir.path()).unwrap();
        let again = parse_config_str(&spec.to_toml(), dir.path()).unwrap();
        assert_eq!(spec, again);
    }
}

#[test]
fn zero_alpha_is_reported_under_its_key() {
    let text = MINIMAL.replace("alpha = 0.5", "alpha = 0");
    match parse_config_str(&text, Path::new(".")) {
        Err(Error::Config { key, msg }) => {
            assert_eq!(key, "model.alpha");
            assert!(msg.contains("hypothesis"), "{msg}");
        }
        other => panic!("expected a configuration error, got {other:?}"),
    }
}

#[test]
fn unknown_keys_and_sections_are_rejected() {
    let text = MINIMAL.replace("nt = 5", "nt = 5\ngamma = 1.0");
    match parse_config_str(&text, Path::new(".")) {
        Err(Error::Config { key, .. }) => assert_eq!(key, "model.gamma"),
        other => panic!("{other:?}"),
    }
    let text = format!("{MINIMAL}\n[extras]\nx = 1\n");
    assert!(matches!(parse_config_str(&text, Path::new(".")), Err(Error::Config { .. })));
}

#[test]
fn phi0_outside_log_domain_names_phi0() {
    let text = MINIMAL.replace("kind = \"regular\"", "kind = \"logarithmic\"").replace("nt = 5", "nt = 5\nphi0 = \"constant:1.2\"");
    match parse_config_str(&text, Path::new(".")) {
        Err(Error::Config { key, .. }) => assert_eq!(key, "model.phi0"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn snapshot_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let grid = std::sync::Arc::new(Grid::new(2, &[5, 3], &[1.0, 0.7]).unwrap());
    let f = Field::from_fn(&grid, |x| (x[0] * 17.3).sin() / 3.0 + x[1].exp());
    let z = Field::zeros(&grid);
    let path = dir.path().join("f.chcf");
    write_snapshot(&path, &[&f, &z]).unwrap();
    let snap = read_snapshot(&path).unwrap();
    assert_eq!(snap.grid.as_ref(), grid.as_ref());
    assert_eq!(snap.fields.len(), 2);
    for (a, b) in snap.fields[0].values().iter().zip(f.values()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert!(snap.fields[1].values().iter().all(|v| v.to_bits() == 0));
}

#[test]
fn snapshot_file_feeds_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let grid = std::sync::Arc::new(Grid::line(16, 1.0).unwrap());
    let s = StateTriple::constant(&grid, 0.0, 0.1, 0.4);
    write_triple(dir.path().join("init.chcf"), &s).unwrap();
    let text = MINIMAL.replace("nt = 5", "nt = 5\nphi0 = \"file:init.chcf#1\"\nsigma0 = \"file:init.chcf#2 + constant:0.1\"");
    let setup = parse_config_str(&text, dir.path()).unwrap().build().unwrap();
    assert_eq!(setup.problem.initial.phi, s.phi);
    assert!((setup.problem.initial.sigma.values()[3] - 0.5).abs() < 1e-15);
}

#[test]
fn timeseries_has_thirteen_columns() {
    let p = desk();
    let u = p.zero_control();
    let traj = p.solve_state(&u).unwrap();
    let csv = timeseries_csv(&time_records(&traj, &u, &p.cost).unwrap());
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), TIMESERIES_COLUMNS.join(","));
    assert_eq!(TIMESERIES_COLUMNS.len(), 13);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), p.nt() + 1);
    assert!(rows.iter().all(|r| r.split(',').count() == 13));
}

#[test]
fn simulate_equilibrium_keeps_mass_and_zero_cost() {
    // constant φ with μ = σ = F'(φ) and no control is a steady state
    let dir = tempfile::tempdir().unwrap();
    let f1 = Potential::regular().f1(0.3).unwrap();
    let text = format!(
        "{MINIMAL}\n[cost]\nphi_q = \"constant:0.3\"\nphi_omega = \"constant:0.3\"\nsigma_q = \"constant:{f1:?}\"\nsigma_omega = \"constant:{f1:?}\"\n\n[control]\nlower = \"constant:0\"\nupper = \"constant:0\"\n\n[output]\ndir = \"out\"\n"
    )
    .replace("nt = 5", &format!("nt = 5\nphi0 = \"constant:0.3\"\nmu0 = \"constant:{f1:?}\"\nsigma0 = \"constant:{f1:?}\""));
    let cfg = write_cfg(dir.path(), &text);
    assert_eq!(run(&["simulate", "--config", &cfg, "--every", "1"]), EXIT_OK);
    let csv = std::fs::read_to_string(dir.path().join("out/timeseries.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert!((r[8] - rows[0][8]).abs() <= 1e-14, "mass drifted: {r:?}");
        assert!(r[1..8].iter().all(|j| j.abs() <= 1e-24), "nonzero cost terms: {r:?}");
    }
    assert!(dir.path().join("out/state_00003.chcf").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_cfg(dir.path(), &MINIMAL.replace("beta = 0.5", "beta = -1"));
    assert_eq!(run(&["simulate", "--config", &bad]), EXIT_CONFIG);
    assert_eq!(run(&["simulate", "--config", "/nonexistent/x.cfg"]), EXIT_SOLVER);
    assert_eq!(run(&["frobnicate"]), EXIT_CONFIG);

    // Newton cannot converge in one iteration from this start
    let text = format!("{MINIMAL}\n[solver]\nnewton_max_iter = 1\nmax_halvings = 0\n\n[output]\ndir = \"a\"\n");
    let cfg = write_cfg(dir.path(), &text);
    assert_eq!(run(&["simulate", "--config", &cfg]), EXIT_SOLVER);

    let text = format!("{MINIMAL}\n[output]\ndir = \"b\"\n");
    let cfg = write_cfg(dir.path(), &text);
    for cmd in ["simulate", "linearize", "adjoint", "optimize"] {
        assert_eq!(run(&[cmd, "--config", &cfg]), EXIT_OK, "{cmd}");
    }
    for f in ["timeseries.csv", "linearized_final.chcf", "terminal_continuous.chcf", "terminal_discrete.chcf", "u_opt.chcf"] {
        assert!(dir.path().join("b").join(f).exists(), "{f}");
    }
}

#[test]
fn check_on_desk_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("desk.cfg").display().to_string();
    let out = dir.path().display().to_string();
    assert_eq!(run(&["check", "--config", &cfg, "--seed", "42", "--out", &out]), EXIT_OK);
    let report = std::fs::read_to_string(dir.path().join("checks.txt")).unwrap();
    assert_eq!(report.lines().count(), 12);
}

#[test]
fn check_reports_failure_with_exit_three() {
    // a loose Krylov tolerance breaks the duality identity at 1e-9
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs_dir().join("desk.cfg"))
        .unwrap()
        .replace("newton_tol = 1e-11", "newton_tol = 1e-11\nlinear_tol = 1e-5\ndirect_work_limit = 0.0");
    let cfg = write_cfg(dir.path(), &text);
    let out = dir.path().display().to_string();
    assert_eq!(run(&["check", "--config", &cfg, "--out", &out]), EXIT_CHECK_FAILED);
}
