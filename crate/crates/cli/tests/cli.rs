use std::path::Path;
use std::process::{Command, Output};

fn attn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_forward_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let tokens = dir.path().join("s.csv");
    let out = dir.path().join("f.csv");
    ok(&attn(&[
        "generate",
        "--kind",
        "simplex",
        "--n",
        "6",
        "--d",
        "7",
        "--rho",
        "0.5",
        "--out",
        p(&tokens),
    ]));
    let text = std::fs::read_to_string(&tokens).unwrap();
    assert!(text.starts_with("# n=6 d=7\n"), "{text}");

    ok(&attn(&[
        "forward",
        "--tokens",
        p(&tokens),
        "--gamma",
        "1",
        "--alpha",
        "0.5",
        "--out",
        p(&out),
    ]));
    assert!(std::fs::read_to_string(&out)
        .unwrap()
        .starts_with("# n=6 d=7\n"));
    let side = json(&dir.path().join("f.csv.json"));
    assert_eq!(side["n"], 6);
    assert_eq!(side["log_z"].as_array().unwrap().len(), 6);
    assert!(side["row_sum_max_abs_error"].as_f64().unwrap() < 1e-14);
}

#[test]
fn gamma_and_beta_are_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let tokens = dir.path().join("g.csv");
    ok(&attn(&[
        "generate",
        "--kind",
        "gaussian",
        "--n",
        "4",
        "--d",
        "3",
        "--out",
        p(&tokens),
    ]));
    let out = dir.path().join("o.csv");
    let both = attn(&[
        "forward",
        "--tokens",
        p(&tokens),
        "--gamma",
        "1",
        "--beta",
        "2",
        "--out",
        p(&out),
    ]);
    assert_eq!(both.status.code(), Some(2));
    let neither = attn(&["forward", "--tokens", p(&tokens), "--out", p(&out)]);
    assert_eq!(neither.status.code(), Some(2));
}

#[test]
fn jacobian_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let tokens = dir.path().join("g.csv");
    let report = dir.path().join("j.json");
    ok(&attn(&[
        "generate",
        "--kind",
        "gaussian",
        "--n",
        "8",
        "--d",
        "4",
        "--seed",
        "3",
        "--out",
        p(&tokens),
    ]));
    ok(&attn(&[
        "jacobian",
        "--tokens",
        p(&tokens),
        "--gamma",
        "1",
        "--exact",
        "--hutchinson",
        "64",
        "--fd-check",
        "5",
        "--seed",
        "1",
        "--out",
        p(&report),
    ]));
    let j = json(&report);
    for key in [
        "n",
        "d",
        "gamma",
        "beta",
        "alpha",
        "eta_exact",
        "eta_hutch",
        "eta_hutch_se",
        "fd_max_rel_err",
    ] {
        assert!(j.get(key).is_some(), "missing {key} in {j}");
    }
    assert!(j["fd_max_rel_err"].as_f64().unwrap() < 1e-6);
    let exact = j["eta_exact"].as_f64().unwrap();
    let (h, se) = (
        j["eta_hutch"].as_f64().unwrap(),
        j["eta_hutch_se"].as_f64().unwrap(),
    );
    assert!((h - exact).abs() < 5.0 * se, "{h} vs {exact} (se {se})");

    // Only the requested fields appear.
    ok(&attn(&[
        "jacobian",
        "--tokens",
        p(&tokens),
        "--beta",
        "2",
        "--out",
        p(&report),
    ]));
    let j = json(&report);
    assert!(j.get("eta_exact").is_some());
    assert!(j.get("eta_hutch").is_none());
    // gamma is reported as beta / ln n
    assert!((j["gamma"].as_f64().unwrap() - 2.0 / 8f64.ln()).abs() < 1e-12);
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for path in [&a, &b] {
        ok(&attn(&[
            "generate",
            "--kind",
            "gaussian",
            "--n",
            "5",
            "--d",
            "4",
            "--seed",
            "9",
            "--out",
            p(path),
        ]));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let ra = dir.path().join("ra.json");
    let rb = dir.path().join("rb.json");
    for r in [&ra, &rb] {
        ok(&attn(&[
            "jacobian",
            "--tokens",
            p(&a),
            "--gamma",
            "2",
            "--hutchinson",
            "10",
            "--seed",
            "4",
            "--out",
            p(r),
        ]));
    }
    assert_eq!(std::fs::read(&ra).unwrap(), std::fs::read(&rb).unwrap());
}

#[test]
fn predict_simplex_json() {
    let out = attn(&[
        "predict", "--case", "simplex", "--rho", "0.5", "--gamma", "4", "--n", "512", "--json",
    ]);
    ok(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["regime"], "supercritical");
    assert_eq!(v["threshold"], 2.0);
    assert!((v["cos_limit"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!((v["eta_limit"].as_f64().unwrap() - (1.0 - 1.0 / 513.0)).abs() < 1e-12);
}

#[test]
fn predict_three_phase_middle() {
    let out = attn(&[
        "predict",
        "--case",
        "three-phase",
        "--rho",
        "0.1,0.2,0.8,0.9",
        "--gamma",
        "2",
        "--json",
    ]);
    ok(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["regime"], "middle");
    assert_eq!(v["z_dominant"], "cluster");
}

#[test]
fn iterate_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let tokens = dir.path().join("g.csv");
    let trace = dir.path().join("t.json");
    ok(&attn(&[
        "generate",
        "--kind",
        "gaussian",
        "--n",
        "6",
        "--d",
        "4",
        "--rho",
        "0.3",
        "--out",
        p(&tokens),
    ]));
    ok(&attn(&[
        "iterate",
        "--tokens",
        p(&tokens),
        "--gamma",
        "0.5",
        "--layers",
        "3",
        "--spectrum",
        "2",
        "--trace",
        p(&trace),
    ]));
    let t = json(&trace);
    assert_eq!(t["layers"].as_array().unwrap().len(), 3);
    assert_eq!(
        t["spectrum"]["top_singular_values"]
            .as_array()
            .unwrap()
            .len(),
        2
    );
}

#[test]
fn sweep_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("s.conf");
    std::fs::write(
        &conf,
        "rho = 0.3, 0.6\ngamma = 0.5, 3\nd = 16\nn = 8\nmetrics = lambda, eta_exact\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    ok(&attn(&[
        "sweep",
        "--config",
        p(&conf),
        "--out",
        p(&out),
        "--workers",
        "2",
        "--seed",
        "3",
    ]));
    for f in ["records.csv", "boundary.csv", "meta.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let records = std::fs::read_to_string(out.join("records.csv")).unwrap();
    // header + 4 points x 2 metrics
    assert_eq!(records.lines().count(), 9, "{records}");
    let meta = json(&out.join("meta.json"));
    assert_eq!(meta["grid"]["seeds"], serde_json::json!([3]));

    let again = dir.path().join("again");
    ok(&attn(&[
        "sweep",
        "--config",
        p(&conf),
        "--out",
        p(&again),
        "--workers",
        "1",
        "--seed",
        "3",
    ]));
    assert_eq!(
        records,
        std::fs::read_to_string(again.join("records.csv")).unwrap()
    );
}

#[test]
fn verify_suites() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("v.json");
    let out = attn(&["verify", "--suite", "jacobian", "--json", p(&report)]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("-> PASS"));
    assert_eq!(json(&report)["passed"], true);

    let out = attn(&["verify", "--suite", "theory"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradient sums closed form"));

    assert_eq!(
        attn(&["verify", "--suite", "nonsense"]).status.code(),
        Some(2)
    );
}

#[test]
fn failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = dir.path().join("o.csv");
    let r = attn(&[
        "forward",
        "--tokens",
        p(&missing),
        "--gamma",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    // simplex needs d >= n + 1
    let r = attn(&[
        "generate",
        "--kind",
        "simplex",
        "--n",
        "5",
        "--d",
        "5",
        "--out",
        p(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("error"));
}

#[test]
fn help_lists_defaults() {
    let out = attn(&["jacobian", "--help"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--gamma",
        "--beta",
        "--exact",
        "--hutchinson",
        "--fd-check",
        "--seed",
        "[default: 0.00001]",
    ] {
        assert!(text.contains(flag), "missing {flag} in\n{text}");
    }
}
