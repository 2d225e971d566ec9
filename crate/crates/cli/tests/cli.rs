use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn corrnoise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corrnoise"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn optimize(dir: &Path, name: &str, objective: &str) -> Value {
    let path = dir.join(name);
    let out = corrnoise(&[
        "optimize",
        "--rounds",
        "2052",
        "--min-sep",
        "342",
        "--max-part",
        "6",
        "--buffers",
        "2",
        "--objective",
        objective,
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    read_json(&path)
}

#[test]
fn optimized_file_reevaluates_to_recorded_loss() {
    let dir = tempfile::tempdir().unwrap();
    let doc = optimize(dir.path(), "p.json", "max");
    let path = dir.path().join("p.json");
    let eval = json(&corrnoise(&["eval", "--params", path.to_str().unwrap()]));
    let recorded = doc["loss"].as_f64().unwrap();
    let evaluated = eval["max_loss"].as_f64().unwrap();
    assert!((recorded - evaluated).abs() <= 1e-9 * recorded);
    assert_eq!(eval["schema"]["k"], 6);
}

#[test]
fn each_objective_wins_on_its_own_metric() {
    let dir = tempfile::tempdir().unwrap();
    let max = optimize(dir.path(), "max.json", "max");
    let rms = optimize(dir.path(), "rms.json", "rms");
    assert_ne!(max["theta"], rms["theta"]);
    let (mr, rr) = (
        max["rms_loss"].as_f64().unwrap(),
        rms["rms_loss"].as_f64().unwrap(),
    );
    let (mm, rm) = (
        max["max_loss"].as_f64().unwrap(),
        rms["max_loss"].as_f64().unwrap(),
    );
    assert!(rr <= mr + 1e-9, "rms-optimized {rr} vs max-optimized {mr}");
    assert!(mm <= rm + 1e-9, "max-optimized {mm} vs rms-optimized {rm}");
}

#[test]
fn invalid_flags_fail_with_usage() {
    let out = corrnoise(&["optimize", "--rounds", "10"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = corrnoise(&[
        "optimize",
        "--rounds",
        "ten",
        "--min-sep",
        "2",
        "--out",
        "x",
    ]);
    assert!(!out.status.success());
    let out = corrnoise(&[
        "eval",
        "--tree",
        "--identity",
        "--rounds",
        "4",
        "--min-sep",
        "1",
    ]);
    assert!(!out.status.success());
    let out = corrnoise(&[
        "optimize",
        "--rounds",
        "10",
        "--min-sep",
        "2",
        "--objective",
        "mean",
        "--out",
        "x",
    ]);
    assert!(!out.status.success());
}

#[test]
fn account_reports_production_rho() {
    let v = json(&corrnoise(&[
        "account",
        "--preset",
        "minsep1000",
        "--rounds",
        "2000",
        "--min-sep",
        "2001",
        "--max-part",
        "1",
        "--sigma",
        "8.681",
    ]));
    let rho = v["rho"].as_f64().unwrap();
    assert!((rho - 2.23e-2).abs() <= 0.02 * 2.23e-2, "{rho}");
    assert!(v["epsilon"].as_f64().unwrap() > 0.0);
    assert_eq!(v["method"], "upper bound (zCDP conversion)");
}

#[test]
fn sweep_rows_status_and_order() {
    let dir = tempfile::tempdir().unwrap();
    let strategy = dir.path().join("id.csv");
    std::fs::write(&strategy, "1,0,0,0\n0,1,0,0\n0,0,1,0\n0,0,0,1\n").unwrap();
    let spec = serde_json::json!({
        "mechanisms": [
            {"kind": "identity"},
            {"kind": "tree"},
            {"kind": "preset", "name": "minsep400"},
            {"kind": "strategy", "path": strategy},
            {"kind": "preset", "name": "missing"},
        ],
        "rounds": [4, 2052],
        "min_seps": [342],
        "max_parts": [1, 6],
    });
    let spec_path = dir.path().join("sweep.json");
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    let out_path = dir.path().join("out.csv");
    let run = || {
        let out = corrnoise(&[
            "sweep",
            "--spec",
            spec_path.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::read_to_string(&out_path).unwrap()
    };
    let first = run();
    assert_eq!(first, run());

    let mut reader = csv::Reader::from_reader(first.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header.join(","),
        "mechanism,n,b,k,sens,max_error,rms_error,max_loss,rms_loss,sens_method,status"
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 5 * 4);

    let find = |mech: &str, n: &str, k: &str| {
        rows.iter()
            .find(|r| &r[0] == mech && &r[1] == n && &r[3] == k)
            .unwrap_or_else(|| panic!("row {mech} {n} {k}"))
    };
    let identity = find("identity", "2052", "6");
    assert_eq!(&identity[10], "ok");
    let sens: f64 = identity[4].parse().unwrap();
    let rms_error: f64 = identity[6].parse().unwrap();
    let rms_loss: f64 = identity[8].parse().unwrap();
    assert_eq!(sens, 6f64.sqrt());
    assert_eq!(rms_loss, sens * rms_error);
    let expected_rms_error = (2053.0f64 / 2.0).sqrt();
    assert!((rms_error - expected_rms_error).abs() <= 1e-9 * expected_rms_error);

    let tree = find("tree", "2052", "6");
    let tree_max: f64 = tree[7].parse().unwrap();
    let tree_rms: f64 = tree[8].parse().unwrap();
    assert!((tree_max - 14.98).abs() <= 0.15 && (tree_rms - 12.47).abs() <= 0.13);

    assert!(find("identity", "4", "6")[10].starts_with("skipped"));
    let strategy_label = format!("strategy:{}", strategy.display());
    assert_eq!(&find(&strategy_label, "4", "1")[10], "ok");
    assert!(find(&strategy_label, "2052", "6")[10].starts_with("skipped"));
    assert!(rows
        .iter()
        .filter(|r| &r[0] == "preset:missing")
        .all(|r| r[10].starts_with("error")));
}

#[test]
fn sweep_over_min_sep_is_smooth() {
    let dir = tempfile::tempdir().unwrap();
    let min_seps: Vec<usize> = (200..=800).step_by(10).collect();
    let spec = serde_json::json!({
        "mechanisms": [{"kind": "preset", "name": "minsep400"}],
        "rounds": [2000],
        "min_seps": min_seps,
        "max_parts": [2],
    });
    let spec_path = dir.path().join("sweep.json");
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    let out = corrnoise(&["sweep", "--spec", spec_path.to_str().unwrap()]);
    assert!(out.status.success());
    let mut reader = csv::Reader::from_reader(out.stdout.as_slice());
    let losses: Vec<f64> = reader
        .records()
        .map(|r| r.unwrap()[7].parse().unwrap())
        .collect();
    assert_eq!(losses.len(), min_seps.len());
    for w in losses.windows(2) {
        assert!((w[1] - w[0]).abs() <= 0.05 * w[0].max(w[1]));
    }
}

#[test]
fn noisegen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str, seed: &str| {
        let path = dir.path().join(name);
        let out = corrnoise(&[
            "noisegen",
            "--preset",
            "minsep100",
            "--rounds",
            "20",
            "--dim",
            "3",
            "--noise-std",
            "1.5",
            "--seed",
            seed,
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::read_to_string(path).unwrap()
    };
    let a = gen("a.csv", "4");
    assert_eq!(a, gen("b.csv", "4"));
    assert_ne!(a, gen("c.csv", "5"));
    assert_eq!(a.lines().count(), 21);
    assert!(a.starts_with("round,x0,x1,x2\n"));
}

#[test]
fn simulate_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "population": {"clients": 24, "dim": 4, "seed": 1},
        "train": {
            "rounds": 30, "clients_per_round": 3, "min_sep": 4, "noise_multiplier": 0.5,
            "mechanism": {"kind": "blt", "theta": [0.9, 0.5], "omega": [0.2, 0.1]},
            "seed": 2
        }
    });
    let config_path = dir.path().join("sim.json");
    std::fs::write(&config_path, config.to_string()).unwrap();
    let run = |sub: &str| {
        let out_dir = dir.path().join(sub);
        let out = corrnoise(&[
            "simulate",
            "--config",
            config_path.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        out_dir
    };
    let (a, b) = (run("a"), run("b"));
    for file in ["metrics.csv", "participation.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap()
        );
    }
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("round,eval_loss,eval_acc,rho_so_far\n"));
    assert_eq!(metrics.lines().count(), 31);
    let participation = std::fs::read_to_string(a.join("participation.csv")).unwrap();
    assert_eq!(participation.lines().count(), 1 + 30 * 3);
    let summary = read_json(&a.join("summary.json"));
    assert_eq!(summary["min_sep_audit"], true);
    assert!(summary["configured_privacy"]["rho"].as_f64().unwrap() > 0.0);
}

#[test]
fn bench_inverse_small_sizes_agree() {
    let out = corrnoise(&["bench-inverse", "--n", "16,64"]);
    assert!(out.status.success());
    let mut reader = csv::Reader::from_reader(out.stdout.as_slice());
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let diff: f64 = r[4].parse().unwrap();
        assert!(diff <= 1e-12);
    }
}

#[test]
fn thread_count_from_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_corrnoise"))
        .args(["eval", "--identity", "--rounds", "8", "--min-sep", "2"])
        .env("CORRNOISE_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    let bad = Command::new(env!("CARGO_BIN_EXE_corrnoise"))
        .args(["eval", "--identity", "--rounds", "8", "--min-sep", "2"])
        .env("CORRNOISE_THREADS", "many")
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
