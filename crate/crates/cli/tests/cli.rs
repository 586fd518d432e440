use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tlrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tlrl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SPEC: &str = r#"{
  "predicates": ["A", "B", "C", "Y"],
  "head": "Y",
  "rules": [{"rule": "Y <- A ^ B : A before B", "weight": 1.0}],
  "b0": 0.0,
  "body_rate": 0.3,
  "horizon": 10.0,
  "kernel": {"kind": "exp_decay", "beta": 0.5}
}"#;

const CONFIG: &str = r#"{
  "kernel": {"kind": "exp_decay", "beta": 0.5},
  "lambda0": 0.1,
  "max_rules": 2,
  "subproblem": {"max_iters": 30, "max_len": 2, "batch_size": 32}
}"#;

fn simulate(dir: &Path) {
    let spec = dir.join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    let o = tlrl(&[
        "simulate",
        spec.to_str().unwrap(),
        "-n",
        "60",
        "-o",
        dir.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["data.json", "truth.rules", "truth.json"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d);
    assert_eq!(
        fs::read_to_string(d.join("truth.rules")).unwrap().trim(),
        "Y <- A ^ B : A before B"
    );
    let data = d.join("data.json");
    let cfg = d.join("config.json");
    fs::write(&cfg, CONFIG).unwrap();
    let model = d.join("model.json");
    let trace = d.join("trace.csv");
    let o = tlrl(&[
        "fit",
        data.to_str().unwrap(),
        "-o",
        model.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(m["head"], "Y");
    assert!(m["b0"].is_f64());
    let csv = fs::read_to_string(&trace).unwrap();
    assert_eq!(csv.lines().next(), Some("iter,wall_secs,loglik,objective,rule,reward"));
    assert!(csv.lines().count() >= 2);

    let metrics = d.join("metrics.json");
    let o = tlrl(&[
        "eval",
        model.to_str().unwrap(),
        d.join("truth.json").to_str().unwrap(),
        "--test",
        data.to_str().unwrap(),
        "-o",
        metrics.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    for key in ["jaccard", "weight_mae", "pred_mae"] {
        assert!(v[key].is_f64(), "{key} in {v}");
    }
    let j = v["jaccard"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&j));

    let o = tlrl(&["predict", model.to_str().unwrap(), data.to_str().unwrap(), "--anchor", "sequence-start"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let p: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(p["mae"].as_f64().unwrap() > 0.0);
    assert!(p["n_predictions"].as_u64().unwrap() > 0);

    let o = tlrl(&[
        "oracle",
        data.to_str().unwrap(),
        model.to_str().unwrap(),
        "--max-len",
        "2",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    // {A,B,C} up to length 2: 3 singles + 3 pairs with 4 options each
    assert_eq!(r["n_candidates"], 15);
    assert!(r["optimal"].is_boolean());
}

#[test]
fn rule_check_prints_canonical_form_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let data = dir.path().join("data.json");
    let o = tlrl(&["rule", "check", "Y <- B ^ A : B after A", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("Y <- A ^ B : A before B"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 60);
    assert!(rows[0].starts_with("seq-0000\t"));

    let o = tlrl(&["rule", "check", "Y <- A ^ ^ B", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("before"), "grammar is printed: {}", stderr(&o));
}

#[test]
fn fit_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d);
    let cfg = d.join("config.json");
    fs::write(&cfg, CONFIG).unwrap();
    let mut models = Vec::new();
    for threads in ["1", "4"] {
        let model = d.join(format!("model-{threads}.json"));
        let o = tlrl(&[
            "fit",
            d.join("data.json").to_str().unwrap(),
            "-o",
            model.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--threads",
            threads,
            "--seed",
            "11",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        models.push(fs::read(&model).unwrap());
    }
    assert_eq!(models[0], models[1]);
}

#[test]
fn exit_codes() {
    assert_eq!(tlrl(&["--help"]).status.code(), Some(0));
    assert_eq!(tlrl(&["--version"]).status.code(), Some(0));
    assert_eq!(tlrl(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(tlrl(&["fit"]).status.code(), Some(1));
    assert_eq!(tlrl(&["predict", "a", "b", "--anchor", "sideways"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = tlrl(&["fit", missing.to_str().unwrap(), "-o", "m.json", "--head", "Y"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"lambda0": -1}"#).unwrap();
    simulate(dir.path());
    let o = tlrl(&[
        "fit",
        dir.path().join("data.json").to_str().unwrap(),
        "-o",
        "m.json",
        "--config",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    fs::write(&bad, r#"{"lambda_zero": 1}"#).unwrap();
    let o = tlrl(&[
        "fit",
        dir.path().join("data.json").to_str().unwrap(),
        "-o",
        "m.json",
        "--config",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lambda_zero"));
}
