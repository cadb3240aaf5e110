use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};
use wharmonic::cli::{read_table, write_table};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wharmonic"))
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
    )
}

fn grid_p1(n: usize, nd: usize) -> Value {
    json!({"p": 1, "q": 1, "omega": [[0.0, 1.0]], "d": [[0.0, 1.0]], "n_omega": [n], "n_d": [nd]})
}

fn geodesic_config(out: &str, solver: &str) -> Value {
    json!({
        "grid": grid_p1(17, 48),
        "boundary": {"kind": "pair-geodesic", "params": {
            "mu0": {"mean": [0.3], "cov": [0.004]},
            "mu1": {"mean": [0.65], "cov": [0.008]}}},
        "solver": {"kind": solver},
        "checks": [],
        "out_dir": out
    })
}

#[test]
fn constant_boundary_has_zero_energy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "grid": grid_p1(9, 32),
        "boundary": {"kind": "constant", "params": {"mean": [0.5], "cov": [0.01]}},
        "solver": {"kind": "bb"},
        "checks": [{"kind": "energy", "expected": 0.0, "tol": 1e-10},
                   {"kind": "max_principle", "functional": {"kind": "entropy"}}],
        "out_dir": "out"
    });
    let path = write_config(dir.path(), "c.json", &cfg);
    let (code, stdout) = run(&["run", path.to_str().unwrap()]);
    assert_eq!(code, 0, "{stdout}");
    let summary: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["schema"], "wharmonic.summary/1");
    assert!(summary["energy"].as_f64().unwrap().abs() < 1e-10);
    for key in [
        "schema",
        "energy",
        "dual_bound",
        "gap",
        "residuals",
        "checks",
        "iters",
        "seconds",
    ] {
        assert!(summary.get(key).is_some(), "missing {key}");
    }
    assert!(dir.path().join("out/field.csv").exists());
}

#[test]
fn geodesic_run_has_small_gap_and_compares_with_quantile() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = geodesic_config("bb", "bb");
    cfg["checks"] = json!([{"kind": "gap", "tol": 0.02}]);
    let a = write_config(dir.path(), "a.json", &cfg);
    let b = write_config(dir.path(), "b.json", &geodesic_config("quant", "quantile"));
    assert_eq!(run(&["run", a.to_str().unwrap()]).0, 0);
    assert_eq!(run(&["run", b.to_str().unwrap()]).0, 0);

    let (code, out) = run(&[
        "compare",
        dir.path().join("bb").to_str().unwrap(),
        dir.path().join("quant").to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let rep: Value = serde_json::from_str(&out).unwrap();
    assert!(
        rep["energy_rel_delta"].as_f64().unwrap().abs() <= 0.03,
        "{rep}"
    );
    assert!(rep["w2_max_cells"].as_f64().unwrap() <= 3.0, "{rep}");

    let (code, out) = run(&[
        "compare",
        dir.path().join("bb").to_str().unwrap(),
        dir.path().join("bb").to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let rep: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(rep["energy_delta"].as_f64().unwrap(), 0.0);
    assert_eq!(rep["w2_max"].as_f64().unwrap(), 0.0);

    // Checks on the stored solution and approximate energies.
    assert_eq!(run(&["check", a.to_str().unwrap()]).0, 0);
    let (code, out) = run(&["dir-eps", a.to_str().unwrap(), "--eps", "0.25,0.125"]);
    assert_eq!(code, 0);
    let rep: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(rep["dir_eps"].as_array().unwrap().len(), 2);
}

#[test]
fn malformed_and_invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(run(&["run", bad.to_str().unwrap()]).0, 2);

    let mut cfg = geodesic_config("x", "bb");
    cfg["boundary"]["kind"] = json!("no-such-generator");
    assert_eq!(
        run(&[
            "run",
            write_config(dir.path(), "g.json", &cfg).to_str().unwrap()
        ])
        .0,
        2
    );

    let mut cfg = geodesic_config("x", "bb");
    cfg["extra"] = json!(1);
    assert_eq!(
        run(&[
            "run",
            write_config(dir.path(), "e.json", &cfg).to_str().unwrap()
        ])
        .0,
        2
    );

    let mut cfg = geodesic_config("x", "bures");
    cfg["solver"]["options"] = json!({});
    assert_eq!(
        run(&[
            "run",
            write_config(dir.path(), "b.json", &cfg).to_str().unwrap()
        ])
        .0,
        2
    );

    assert_eq!(
        run(&["run", dir.path().join("missing.json").to_str().unwrap()]).0,
        2
    );
}

#[test]
fn failing_check_exits_1_and_unconverged_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = geodesic_config("f", "quantile");
    cfg["checks"] = json!([{"kind": "energy", "expected": 1.0, "tol": 1e-3}]);
    assert_eq!(
        run(&[
            "run",
            write_config(dir.path(), "f.json", &cfg).to_str().unwrap()
        ])
        .0,
        1
    );

    let mut cfg = geodesic_config("n", "bb");
    cfg["solver"]["options"] = json!({"max_iters": 20});
    assert_eq!(
        run(&[
            "run",
            write_config(dir.path(), "n.json", &cfg).to_str().unwrap()
        ])
        .0,
        3
    );
    assert!(dir.path().join("n/summary.json").exists());
}

#[test]
fn bures_run_reports_principles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "grid": {"p": 2, "q": 2, "omega": [[0.0, 1.0], [0.0, 1.0]], "d": [[-4.0, 4.0], [-4.0, 4.0]], "n_omega": [7, 7], "n_d": [16, 16]},
        "boundary": {"kind": "elliptic", "params": {"a": ["1 + 0.3*x", "0.2*x*y", "0.2*x*y", "0.8 + 0.2*y"]}},
        "solver": {"kind": "bures"},
        "checks": [{"kind": "el_residual", "tol": 1e-6}, {"kind": "det_principle"},
                   {"kind": "quadratic_max_principle", "c": [1.0, 0.2, 0.2, 0.5]}],
        "out_dir": "out"
    });
    let path = write_config(dir.path(), "b.json", &cfg);
    let (code, out) = run(&["run", path.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");
    assert!(dir.path().join("out/spd.csv").exists());
    assert_eq!(run(&["check", path.to_str().unwrap()]).0, 0);
}

#[test]
fn field_table_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let coords: Vec<[f64; 2]> = (0..7)
        .map(|k| [k as f64 / 6.0, 1.0 - k as f64 / 3.0])
        .collect();
    let mut values = Vec::new();
    for k in 0..coords.len() {
        for j in 0..5 {
            let x = ((k * 5 + j) as f64 * 0.7123).sin() * 10f64.powi(j as i32 * 7 - 14);
            values.push(x);
        }
    }
    values[3] = -0.0;
    values[4] = f64::MIN_POSITIVE;
    values[5] = 1.0 / 3.0;
    values[6] = 1e300;
    write_table(&path, 2, &coords, "m", 5, &values).unwrap();
    let back = read_table(&path, 2, &coords, 5).unwrap();
    assert_eq!(back.len(), values.len());
    for (a, b) in values.iter().zip(&back) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
