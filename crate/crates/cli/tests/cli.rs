use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pacmix(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pacmix"))
        .env("PACMIX_OUT_DIR", dir)
        .args(args)
        .output()
        .expect("spawn pacmix")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const K1: &str = r#"{"k":1,"n":2,"mu_max":1.0,"sigma2_min":1.0,"sigma2_max":1.0,"seed":3,"m":20000,
    "weights":[1.0],"means":[[0.5,0.0]],"variances":[[1.0,1.0]]}"#;

#[test]
fn gen_explicit_single_component() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), K1);
    let out = pacmix(d.path(), &["gen", &cfg]);
    ok(&out);
    let model = json(&d.path().join("model.json"));
    assert_eq!(model["weights"], serde_json::json!([1.0]));
    assert!(model["invocation"]["args"].as_array().unwrap().len() >= 2);
    let csv = fs::read_to_string(d.path().join("samples.csv")).unwrap();
    assert!(csv.starts_with("x1,x2\n"));
    assert_eq!(csv.lines().count(), 20001);
    assert!(d.path().join("samples.csv.provenance.json").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("L = "));
}

#[test]
fn gen_on_grid() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        r#"{"k":3,"n":3,"mu_max":1.0,"sigma2_min":0.5,"sigma2_max":2.0,"seed":11,"m":10,"on_grid":true,"grid_step":0.25}"#,
    );
    ok(&pacmix(d.path(), &["gen", &cfg]));
    let model = json(&d.path().join("model.json"));
    let on = |v: f64| ((v / 0.25).round() * 0.25 - v).abs() < 1e-12;
    for w in model["weights"].as_array().unwrap() {
        assert!(on(w.as_f64().unwrap()));
    }
    for c in model["components"].as_array().unwrap() {
        for m in c["means"].as_array().unwrap() {
            assert!(on(m.as_f64().unwrap()));
        }
    }
}

#[test]
fn gen_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        r#"{"k":2,"n":2,"mu_max":1.0,"sigma2_min":0.5,"sigma2_max":2.0,"seed":5,"m":500}"#,
    );
    ok(&pacmix(d.path(), &["gen", &cfg]));
    let first: Vec<Vec<u8>> = ["model.json", "samples.csv"]
        .iter()
        .map(|f| fs::read(d.path().join(f)).unwrap())
        .collect();
    ok(&pacmix(d.path(), &["gen", &cfg]));
    for (i, f) in ["model.json", "samples.csv"].iter().enumerate() {
        assert_eq!(fs::read(d.path().join(f)).unwrap(), first[i], "{f}");
    }
}

#[test]
fn learn_planted_single_gaussian() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), K1);
    ok(&pacmix(d.path(), &["gen", &cfg]));
    let samples = d.path().join("samples.csv");
    let truth = d.path().join("model.json");
    let out = pacmix(
        d.path(),
        &[
            "learn",
            "--samples",
            samples.to_str().unwrap(),
            "--k",
            "1",
            "--mu-max",
            "1",
            "--sigma2-min",
            "1",
            "--sigma2-max",
            "1",
            "--eps",
            "0.2",
            "--seed",
            "7",
            "--truth",
            truth.to_str().unwrap(),
        ],
    );
    ok(&out);
    let report = json(&d.path().join("report.json"));
    let kl = report["kl_to_truth"]["value"].as_f64().unwrap();
    let se = report["kl_to_truth"]["std_error"].as_f64().unwrap();
    assert!(kl <= 0.2 + 3.0 * se, "KL {kl} +- {se}");
    let learned = json(&d.path().join("learned.json"));
    assert_eq!(learned["weights"].as_array().unwrap().len(), 1);

    // Same flags, same model.
    let before = fs::read_to_string(d.path().join("learned.json")).unwrap();
    ok(&pacmix(
        d.path(),
        &[
            "learn",
            "--samples",
            samples.to_str().unwrap(),
            "--k",
            "1",
            "--mu-max",
            "1",
            "--sigma2-min",
            "1",
            "--sigma2-max",
            "1",
            "--eps",
            "0.2",
            "--seed",
            "7",
            "--truth",
            truth.to_str().unwrap(),
            "--threads",
            "1",
        ],
    ));
    let again: Value = serde_json::from_str(&fs::read_to_string(d.path().join("learned.json")).unwrap()).unwrap();
    let before: Value = serde_json::from_str(&before).unwrap();
    assert_eq!(again["components"], before["components"]);
    assert_eq!(again["weights"], before["weights"]);
}

#[test]
fn learn_missing_samples_exits_one() {
    let d = tempfile::tempdir().unwrap();
    let out = pacmix(
        d.path(),
        &[
            "learn",
            "--samples",
            "/no/such/file.csv",
            "--k",
            "1",
            "--mu-max",
            "1",
            "--sigma2-min",
            "1",
            "--sigma2-max",
            "1",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/file.csv"));
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(pacmix(d.path(), &["learn"]).status.code(), Some(1));
    assert_eq!(pacmix(d.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn learn_small_budget_exits_two_with_partial_report() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), K1);
    ok(&pacmix(d.path(), &["gen", &cfg]));
    let samples = d.path().join("samples.csv");
    let out = pacmix(
        d.path(),
        &[
            "learn",
            "--samples",
            samples.to_str().unwrap(),
            "--k",
            "2",
            "--mu-max",
            "1",
            "--sigma2-min",
            "1",
            "--sigma2-max",
            "1",
            "--budget-max-work",
            "3",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let report = json(&d.path().join("report.json"));
    assert!(report["error"].as_str().unwrap().contains("budget"));
    assert_eq!(report["moment_rows"], serde_json::json!(10000));
}

fn model_file(dir: &Path, name: &str, mean: f64, var: f64) -> String {
    let p = dir.join(name);
    fs::write(
        &p,
        format!(
            r#"{{"bounds":{{"mu_max":1.0,"sigma2_min":0.25,"sigma2_max":4.0}},"weights":[1.0],"components":[{{"means":[{mean}],"variances":[{var}]}}]}}"#
        ),
    )
    .unwrap();
    p.to_str().unwrap().to_string()
}

fn kl_json(out: &Output) -> Value {
    ok(out);
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn kl_methods() {
    let d = tempfile::tempdir().unwrap();
    let p = model_file(d.path(), "p.json", 0.0, 1.0);
    let q = model_file(d.path(), "q.json", 0.5, 2.0);
    let same = kl_json(&pacmix(d.path(), &["kl", "--p", &p, "--q", &p, "--m", "10000"]));
    assert!(same["value"].as_f64().unwrap().abs() < 1e-12);

    let cf = kl_json(&pacmix(
        d.path(),
        &["kl", "--p", &p, "--q", &q, "--method", "closed_form"],
    ));
    let want = 0.5 * (2f64.ln() + (1.0 + 0.25) / 2.0 - 1.0);
    assert!((cf["value"].as_f64().unwrap() - want).abs() < 1e-14);
    assert_eq!(cf["method"], "closed_form");

    let mc = kl_json(&pacmix(
        d.path(),
        &["kl", "--p", &p, "--q", &q, "--m", "1000000", "--seed", "4"],
    ));
    let (v, se) = (mc["value"].as_f64().unwrap(), mc["std_error"].as_f64().unwrap());
    assert!(se > 0.0 && (v - want).abs() < 4.0 * se, "{v} {se}");
    assert_eq!(mc["seed"], 4);

    let qd = kl_json(&pacmix(
        d.path(),
        &["kl", "--p", &p, "--q", &q, "--method", "quadrature"],
    ));
    assert!((qd["value"].as_f64().unwrap() - want).abs() < 1e-8);
}

#[test]
fn wam_convert_select_chain() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        r#"{"k":2,"n":2,"mu_max":1.0,"sigma2_min":1.0,"sigma2_max":1.0,"seed":8,"m":20000,
            "weights":[0.5,0.5],"means":[[0.5,-0.5],[-0.5,0.5]],"variances":[[1,1],[1,1]]}"#,
    );
    ok(&pacmix(d.path(), &["gen", &cfg]));
    let s = d.path().join("samples.csv");
    let s = s.to_str().unwrap();
    let bounds = ["--mu-max", "1", "--sigma2-min", "1", "--sigma2-max", "1"];
    let mut args = vec!["wam", "--samples", s, "--k", "2", "--budget-max-list", "8"];
    args.extend(bounds);
    ok(&pacmix(d.path(), &args));
    let cands = fs::read_to_string(d.path().join("candidates.jsonl")).unwrap();
    let first: Value = serde_json::from_str(cands.lines().next().unwrap()).unwrap();
    assert!(first["parents"].is_array());
    assert!(d.path().join("candidates.jsonl.provenance.json").exists());
    assert!(json(&d.path().join("moments.json"))["pair"].is_array());

    let c = d.path().join("candidates.jsonl");
    let mut args = vec!["convert", "--candidates", c.to_str().unwrap()];
    args.extend(bounds);
    ok(&pacmix(d.path(), &args));
    let hyps = fs::read_to_string(d.path().join("hypotheses.jsonl")).unwrap();
    assert_eq!(hyps.lines().count(), cands.lines().count());

    let h = d.path().join("hypotheses.jsonl");
    ok(&pacmix(
        d.path(),
        &[
            "select",
            "--hypotheses",
            h.to_str().unwrap(),
            "--samples",
            s,
            "--eps",
            "0.1",
        ],
    ));
    let sel = json(&d.path().join("selected.json"));
    let idx = sel["index"].as_u64().unwrap() as usize;
    let scores = fs::read_to_string(d.path().join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), hyps.lines().count() + 1);
    let best = scores
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .unwrap()
        .0;
    assert_eq!(idx, best);
}
