use std::path::Path;
use std::process::{Command, Output};

use fpsurvey::pipeline::Stage;

fn fpsurvey(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpsurvey")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = fpsurvey(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, format!("[map]\nfixture = \"room\"\n[eval]\ntest_points = 20\n{extra}")).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn subcommands_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[injection]\ngross_error_fraction = 0.05\nsingle_band_loss = 0.1\n");
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    let f = |name: &str| out.join(name).to_str().unwrap().to_owned();
    let base = ["--config", cfg.as_str(), "--seed", "3", "--out", o];
    let run = |sub: &[&str]| ok(&[&base[..], sub].concat());

    run(&["segment"]);
    for name in ["inflated.pgm", "regions.pgm", "regions.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let regions: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("regions.json")).unwrap()).unwrap();
    assert!(!regions.as_array().unwrap().is_empty());

    run(&["plan"]);
    assert!(std::fs::read_to_string(out.join("plan.jsonl")).unwrap().lines().count() > 0);
    assert!(out.join("plan_overlay.pgm").exists());

    run(&["survey"]);
    run(&["recover", "--db", &f("db_raw.csv")]);
    run(&["detect", "--db", &f("db_recovered.csv")]);
    let stdout = run(&["repair", "--db", &f("db_recovered.csv"), "--detect", &f("detect.json")]);
    assert!(stdout.contains("resurveyed"));
    run(&["build-map", "--db", &f("db_repaired.csv"), "--detect", &f("detect.json")]);

    std::fs::write(
        dir.path().join("obs.json"),
        r#"[{"readings": [[0, "2.4", -55.0], [0, "5", -62.0]]}, {"readings": []}]"#,
    )
    .unwrap();
    run(&["localize", "--map", &f("map.csv"), "--obs", dir.path().join("obs.json").to_str().unwrap()]);
    let located: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("localized.json")).unwrap()).unwrap();
    assert_eq!(located.as_array().unwrap().len(), 2);

    let stdout = run(&["eval", "--map", &f("map.csv")]);
    assert!(stdout.contains("bayes") && stdout.contains("knn"));
    assert!(out.join("cdf_bayes.csv").exists() && out.join("eval.json").exists());

    let stdout = run(&["compare"]);
    assert!(stdout.contains("time ratio"));
    let c: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("comparison.json")).unwrap()).unwrap();
    assert!(c["time_ratio"].as_f64().unwrap() < 1.0);
}

#[test]
fn maintenance_repair_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let e0 = dir.path().join("e0");
    ok(&["--config", &cfg, "--seed", "2", "--out", e0.to_str().unwrap(), "demo"]);

    let cfg1 = dir.path().join("cfg1.toml");
    std::fs::write(&cfg1, format!("epoch = 1\n{}", std::fs::read_to_string(&cfg).unwrap())).unwrap();
    let e1 = dir.path().join("e1");
    let base = ["--config", cfg1.to_str().unwrap(), "--seed", "2", "--out", e1.to_str().unwrap()];
    ok(&[&base[..], &["survey"]].concat());
    let raw = e1.join("db_raw.csv");
    ok(&[&base[..], &["detect", "--db", raw.to_str().unwrap()]].concat());
    let stdout = ok(&[
        &base[..],
        &[
            "repair",
            "--db",
            raw.to_str().unwrap(),
            "--detect",
            e1.join("detect.json").to_str().unwrap(),
            "--previous",
            e0.join("db.csv").to_str().unwrap(),
        ],
    ]
    .concat());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(e1.join("repair.json")).unwrap()).unwrap();
    assert!(!report["shifts"].as_array().unwrap().is_empty(), "{stdout}");
}

#[test]
fn failures_exit_with_their_stage_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("out");
    let o = o.to_str().unwrap();

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "sede = 1\n").unwrap();
    let out = fpsurvey(&["--config", bad.to_str().unwrap(), "--out", o, "plan"]);
    assert_eq!(out.status.code(), Some(Stage::Config.exit_code()));

    let out = fpsurvey(&["--config", "/nonexistent/cfg.toml", "--out", o, "plan"]);
    assert_eq!(out.status.code(), Some(Stage::Config.exit_code()));

    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, "[map]\nfixture = \"attic\"\n").unwrap();
    let out = fpsurvey(&["--config", unknown.to_str().unwrap(), "--out", o, "segment"]);
    assert_eq!(out.status.code(), Some(Stage::Config.exit_code()));

    let missing = dir.path().join("missing.toml");
    std::fs::write(&missing, "[map]\npath = \"/nonexistent/floor.pgm\"\n").unwrap();
    let out = fpsurvey(&["--config", missing.to_str().unwrap(), "--out", o, "demo"]);
    assert_eq!(out.status.code(), Some(Stage::Load.exit_code()));
    assert!(String::from_utf8_lossy(&out.stderr).contains("load"));

    let out = fpsurvey(&["--out", o, "detect", "--db", "/nonexistent/db.csv"]);
    assert_eq!(out.status.code(), Some(Stage::Load.exit_code()));

    let out = fpsurvey(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}
