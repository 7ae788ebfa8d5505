use std::path::Path;
use std::process::{Command, Output};

fn epismc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epismc"))
        .args(args)
        .env_remove("EPISMC_CONFIG")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_64_and_help_exits_0() {
    assert_eq!(epismc(&["simulate", "--bogus"]).status.code(), Some(64));
    assert_eq!(epismc(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(epismc(&["--help"]).status.code(), Some(0));
    assert_eq!(epismc(&["--version"]).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = epismc(&["fit-batch", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no dataset"));

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model": {"k": 4, "colour": "red"}}"#).unwrap();
    let o = epismc(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));

    let cfg = dir.path().join("k3.json");
    std::fs::write(&cfg, r#"{"model": {"k": 3}}"#).unwrap();
    assert_eq!(epismc(&["simulate", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(1));
}

#[test]
fn simulate_is_reproducible_and_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_ok(&epismc(&["simulate", "--seed", "8", "--T", "40", "--out", s(&a)]));
    assert_ok(&epismc(&["--threads", "1", "simulate", "--seed", "8", "--T", "40", "--out", s(&b)]));
    for f in ["cases.csv", "deaths.csv", "latent.csv", "truth.json", "dataset.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let cases = std::fs::read_to_string(a.join("cases.csv")).unwrap();
    assert!(cases.starts_with("date,value\n2020-03-01,"));
    assert_eq!(cases.lines().count(), 41);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seed"], 8);
    assert!(manifest["outputs"].as_array().unwrap().iter().any(|v| v == "cases.csv"));
}

#[test]
fn comparing_a_run_with_itself_gives_zero_clpbf() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let seq = dir.path().join("seq");
    let cmp = dir.path().join("cmp");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seq": {"tune_iters": 3}}"#).unwrap();
    assert_ok(&epismc(&["simulate", "--seed", "2", "--T", "50", "--out", s(&data)]));
    let ds = data.join("dataset.json");
    assert_ok(&epismc(&[
        "fit-seq", "--config", s(&cfg), "--data", s(&ds), "--N", "4", "--M", "16", "--t0", "40", "--out", s(&seq),
    ]));
    let pl = std::fs::read_to_string(seq.join("pl.csv")).unwrap();
    assert!(pl.starts_with("t,log_pl,log_pl_pred,cum_log_pl,ess,resampled\n"));
    assert_eq!(pl.lines().count(), 11);

    let a = format!("first={}", s(&seq));
    let b = format!("second={}", s(&seq));
    assert_ok(&epismc(&["compare", "--runs", &a, &b, "--out", s(&cmp)]));
    let mut rdr = csv::Reader::from_path(cmp.join("comparison.csv")).unwrap();
    let mut pl_rows = 0;
    for r in rdr.records() {
        let r = r.unwrap();
        if r[0].starts_with("log_pl") {
            assert_eq!(r[5].parse::<f64>().unwrap(), 0.0);
            pl_rows += 1;
        }
    }
    assert_eq!(pl_rows, 4);

    // A sequential run cannot be diagnosed as a batch run.
    assert_eq!(epismc(&["diagnose", "--run", s(&seq), "--out", s(&cmp)]).status.code(), Some(1));
}
