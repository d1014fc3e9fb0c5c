use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn chaosens(out: &Path, args: &[&str]) -> Value {
    let o = Command::new(env!("CARGO_BIN_EXE_chaosens"))
        .args(["--seed", "7", "--paths", "400", "--out"])
        .arg(out)
        .args(args)
        .output()
        .unwrap();
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).unwrap()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

fn assert_summary(v: &Value, command: &str) {
    for k in [
        "command",
        "params",
        "estimate",
        "stderr",
        "fit",
        "total_cost_steps",
        "seed",
    ] {
        assert!(v.get(k).is_some(), "{command}: missing {k}");
    }
    assert_eq!(v["command"], command);
    assert_eq!(v["seed"], 7);
    assert!(v["params"].get("out_dir").is_none());
}

#[test]
fn csv_headers_and_summary_keys() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path();

    let v = chaosens(out, &["variance-study", "--t-grid", "0.5,1,1.5,2"]);
    assert_summary(&v, "variance-study");
    assert_eq!(
        header(&out.join("variance-study.csv")),
        "T,mean,variance,stderr,n,blowups"
    );
    for k in ["slope", "intercept", "r2"] {
        assert!(v["fit"][k].is_number());
    }

    let v = chaosens(out, &["mlmc", "--eps", "1", "--T", "0.5"]);
    assert_summary(&v, "mlmc");
    assert_eq!(header(&out.join("mlmc.csv")), "level,N,mean,variance,cost");
    for k in ["total_cost", "alpha", "beta"] {
        assert!(v.get(k).is_some(), "mlmc: missing {k}");
    }

    let v = chaosens(
        out,
        &[
            "weak-sigma",
            "--sigma-grid",
            "8,16",
            "--t-max",
            "1",
            "--reference",
            "1",
        ],
    );
    assert_summary(&v, "weak-sigma");
    assert_eq!(
        header(&out.join("weak-sigma.csv")),
        "sigma,T,estimate,stderr,weak_error"
    );

    let v = chaosens(out, &["lambda-star", "--t-max", "3"]);
    assert_summary(&v, "lambda-star");
    assert_eq!(header(&out.join("lambda-star.csv")), "t,mean,envelope");

    let v = chaosens(out, &["sens", "--T", "1", "--estimator", "isps-sigma"]);
    assert_summary(&v, "sens");
    for k in ["variance", "n", "T", "h", "cost"] {
        assert!(v.get(k).is_some(), "sens: missing {k}");
    }
    assert_eq!(v["n"], 400);

    let v = chaosens(out, &["rr", "--T", "auto", "--sigma", "15", "--order", "3"]);
    assert_summary(&v, "rr");
    assert_eq!(v["order"], 3);
    assert_eq!(v["sigmas"].as_array().unwrap().len(), 3);
    assert_eq!(v["T"], 2.0);
}

#[test]
fn config_file_is_layered_under_flags() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("ou.json");
    std::fs::write(
        &cfg,
        r#"{"model":"ou","kappa":1.0,"theta":0.0,"sigma":0.5,"x0":[1.0],"direction":[1.0],"estimator":"malliavin","t_end":1.0}"#,
    )
    .unwrap();
    let v = chaosens(
        d.path(),
        &["--config", cfg.to_str().unwrap(), "sens", "--h", "0.0625"],
    );
    assert_eq!(v["params"]["model"], "ou");
    assert_eq!(v["params"]["estimator"], "malliavin");
    let est = v["estimate"].as_f64().unwrap();
    let se = v["stderr"].as_f64().unwrap();
    assert!(
        (est - (1.0 - (-1.0f64).exp())).abs() < 4.0 * se + 0.1,
        "{est} ± {se}"
    );

    // The summary's params reproduce the run when fed back as a config.
    let params = d.path().join("params.json");
    std::fs::write(&params, v["params"].to_string()).unwrap();
    let again = chaosens(d.path(), &["--config", params.to_str().unwrap(), "sens"]);
    assert_eq!(again["estimate"], v["estimate"]);
}

#[test]
fn bad_input_is_reported() {
    let o = Command::new(env!("CARGO_BIN_EXE_chaosens"))
        .args(["sens", "--model", "ou"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("x0"));

    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.json");
    std::fs::write(&cfg, r#"{"sigmaa": 3}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_chaosens"))
        .args(["--config", cfg.to_str().unwrap(), "simulate"])
        .output()
        .unwrap();
    assert!(!o.status.success());
}
