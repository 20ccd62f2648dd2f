use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tempfile::TempDir;

fn mcref(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcref"))
        .args(args)
        .output()
        .expect("spawn mcref")
}

fn ok(args: &[&str]) -> Output {
    let out = mcref(args);
    assert!(
        out.status.success(),
        "mcref {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json_of(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {stderr}"))
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_owned()
}

const FAST: [&str; 8] = [
    "--epochs",
    "20",
    "--lr",
    "0.05",
    "--batch-size",
    "16",
    "--decay-every",
    "20",
];

fn train(dir: &TempDir, seed: &str, name: &str) -> (String, String) {
    let ckpt = p(dir, &format!("{name}.ckpt.json"));
    let report = p(dir, &format!("{name}.json"));
    let mut args = vec![
        "--seed",
        seed,
        "train",
        "--samples",
        "400",
        "--checkpoint",
        &ckpt,
        "--out",
        &report,
    ];
    args.extend(FAST);
    ok(&args);
    (ckpt, report)
}

#[test]
fn train_is_byte_identical_per_seed() {
    let dir = TempDir::new().unwrap();
    let (c1, r1) = train(&dir, "7", "a");
    let (c2, r2) = train(&dir, "7", "b");
    let (c3, _) = train(&dir, "8", "c");
    assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    assert_ne!(std::fs::read(&c1).unwrap(), std::fs::read(&c3).unwrap());

    let report = json_of(Path::new(&r1));
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["command"], "train");
    assert_eq!(report["epochs"].as_array().unwrap().len(), 20);
    assert!(report["accuracy"]["test"].as_f64().unwrap() > 0.75);
    assert_eq!(
        report["data"]["sizes"],
        json!({"train": 240, "val": 80, "test": 80, "pool": 0})
    );
}

#[test]
fn mc_predict_reports_and_dumps_posteriors() {
    let dir = TempDir::new().unwrap();
    let (ckpt, _) = train(&dir, "3", "m");
    let dump = p(&dir, "post.jsonl");
    let run = |out: &str| {
        ok(&[
            "--seed",
            "3",
            "mc-predict",
            "--samples",
            "400",
            "--checkpoint",
            &ckpt,
            "--passes",
            "20",
            "--posteriors",
            &dump,
            "--out",
            out,
        ])
    };
    let (a, b) = (p(&dir, "p1.json"), p(&dir, "p2.json"));
    run(&a);
    run(&b);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let report = json_of(Path::new(&a));
    assert_eq!(report["samples"], 80);
    let counted: u64 = report["outcomes"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(counted, 80);
    let lines: Vec<Value> = std::fs::read_to_string(&dump)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 80);
    assert_eq!(lines[0]["T"], 20);
    assert!(lines[0].get("samples").is_none());
}

#[test]
fn sweep_threshold_has_one_row_per_tau() {
    let dir = TempDir::new().unwrap();
    let (ckpt, _) = train(&dir, "1", "s");
    let csv = p(&dir, "sweep.csv");
    let out = ok(&[
        "--seed",
        "1",
        "sweep-threshold",
        "--samples",
        "400",
        "--checkpoint",
        &ckpt,
        "--taus",
        "0.08,0.1,0.2,0.3",
        "--sigma-formula",
        "sample-std",
        "--passes",
        "30",
        "--csv-out",
        &csv,
    ]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = report["rows"].as_array().unwrap();
    let taus: Vec<f64> = rows.iter().map(|r| r["tau"].as_f64().unwrap()).collect();
    assert_eq!(taus, [0.08, 0.1, 0.2, 0.3]);
    let mut last = u64::MAX;
    for r in rows {
        for key in ["rejected", "retained"] {
            assert!(r[key].is_u64());
        }
        for key in ["tp", "tn", "fp", "fn"] {
            assert!(r["confusion"][key].is_u64());
        }
        for key in ["precision", "recall", "f1"] {
            assert!(r["metrics"].get(key).is_some());
        }
        assert_eq!(
            r["rejected"].as_u64().unwrap() + r["retained"].as_u64().unwrap(),
            80
        );
        assert!(r["rejected"].as_u64().unwrap() <= last);
        last = r["rejected"].as_u64().unwrap();
    }
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5);

    let bad = mcref(&[
        "sweep-threshold",
        "--samples",
        "400",
        "--checkpoint",
        &ckpt,
        "--taus",
        "0.3,0.1",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn referral_curve_and_export() {
    let dir = TempDir::new().unwrap();
    let (ckpt, _) = train(&dir, "2", "r");
    let report = p(&dir, "curve.json");
    ok(&[
        "--seed",
        "2",
        "referral-curve",
        "--samples",
        "400",
        "--checkpoint",
        &ckpt,
        "--passes",
        "20",
        "--fractions",
        "0,0.2,0.5",
        "--repeats",
        "3",
        "--out",
        &report,
    ]);
    let v = json_of(Path::new(&report));
    assert_eq!(v["command"], "referral-curve");
    assert_eq!(
        v["policy"],
        json!({"kind": "informed_fraction", "fraction": 0.2})
    );
    assert_eq!(v["per_fraction"].as_array().unwrap().len(), 6);
    assert_eq!(v["points"].as_array().unwrap().len(), 3 + 9);

    let (e1, e2) = (p(&dir, "e1.json"), p(&dir, "e2.json"));
    ok(&["export-report", "--input", &report, "--out", &e1]);
    ok(&["export-report", "--input", &e1, "--out", &e2]);
    assert_eq!(std::fs::read(&e1).unwrap(), std::fs::read(&e2).unwrap());
    assert_eq!(json_of(Path::new(&e1)), v);

    let out = ok(&["export-report", "--input", &report, "--format", "csv"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 13);
    let out = ok(&[
        "export-report",
        "--input",
        &report,
        "--format",
        "csv",
        "--table",
        "per_fraction",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().next().unwrap().contains("nra.mean"));
}

#[test]
fn grid_dropout_reports_every_cell() {
    let dir = TempDir::new().unwrap();
    let report = p(&dir, "grid.json");
    let mut args = vec![
        "grid-dropout",
        "--samples",
        "200",
        "--alphas",
        "0.1,0.5",
        "--betas",
        "0.2,0.4",
        "--folds",
        "3",
        "--hidden",
        "8,8",
        "--out",
        &report,
    ];
    args.extend(FAST);
    ok(&args);
    let v = json_of(Path::new(&report));
    assert_eq!(v["cells"].as_array().unwrap().len(), 4);
    let best = v["grid"]["best_accuracy"].as_f64().unwrap();
    assert!(v["cells"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["accuracy"].as_f64().unwrap() <= best));
}

fn al_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--samples", "300", "--passes", "10", "--hidden", "16"];
    v.extend(FAST);
    v.extend(extra);
    v
}

#[test]
fn active_learn_is_deterministic_and_resumable() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (p(&dir, "a.json"), p(&dir, "b.json"));
    let (manifest, ckpt) = (p(&dir, "run.manifest.json"), p(&dir, "run.ckpt.json"));
    let mut args = vec!["--seed", "5", "active-learn"];
    args.extend(al_args(&[
        "--max-iterations",
        "3",
        "--target",
        "1.0",
        "--out",
        &a,
    ]));
    args.extend(["--manifest", &manifest, "--checkpoint", &ckpt]);
    ok(&args);
    let mut again = vec!["--seed", "5", "active-learn"];
    again.extend(al_args(&[
        "--max-iterations",
        "3",
        "--target",
        "1.0",
        "--out",
        &b,
    ]));
    ok(&again);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let report = json_of(Path::new(&a));
    assert_eq!(report["stop_reason"], "max_iterations");
    assert_eq!(report["history"].as_array().unwrap().len(), 4);

    // Resuming a finished manifest reproduces the report.
    let c = p(&dir, "c.json");
    let mut resume = vec!["--seed", "5", "active-learn"];
    resume.extend(al_args(&[
        "--out",
        &c,
        "--resume",
        &manifest,
        "--resume-checkpoint",
        &ckpt,
    ]));
    ok(&resume);
    let resumed = json_of(Path::new(&c));
    assert_eq!(resumed["history"], report["history"]);
    assert_eq!(resumed["final_state_digest"], report["final_state_digest"]);

    // Different data flags no longer match the manifest checksums.
    let mut wrong = vec!["--seed", "6", "active-learn"];
    wrong.extend(al_args(&[
        "--resume",
        &manifest,
        "--resume-checkpoint",
        &ckpt,
    ]));
    assert_eq!(mcref(&wrong).status.code(), Some(2));
}

#[test]
fn random_strategy_with_whole_pool_budget_takes_one_round() {
    let dir = TempDir::new().unwrap();
    let first = p(&dir, "first.json");
    let mut args = vec![
        "active-learn",
        "--strategy",
        "random",
        "--max-iterations",
        "1",
        "--out",
        &first,
    ];
    args.extend(al_args(&[]));
    ok(&args);
    let v = json_of(Path::new(&first));
    let sizes = &v["data"]["sizes"];
    let candidates = sizes["train"].as_u64().unwrap() + sizes["pool"].as_u64().unwrap();
    let pool = candidates - v["history"][0]["labelled"].as_u64().unwrap();

    let kappa = pool.to_string();
    let whole = p(&dir, "whole.json");
    let mut args = vec![
        "active-learn",
        "--strategy",
        "random",
        "--kappa",
        &kappa,
        "--out",
        &whole,
    ];
    args.extend(al_args(&["--target", "1.0"]));
    ok(&args);
    let v = json_of(Path::new(&whole));
    assert_eq!(v["stop_reason"], "pool_exhausted");
    let history = v["history"].as_array().unwrap();
    assert_eq!(history.len(), 2);
    assert_eq!(
        history[1]["acquired"].as_array().unwrap().len() as u64,
        pool
    );
    assert_eq!(history[1]["labelled_fraction"], 1.0);

    let too_big = (pool + 1).to_string();
    let mut args = vec!["active-learn", "--strategy", "random", "--kappa", &too_big];
    args.extend(al_args(&[]));
    assert_eq!(mcref(&args).status.code(), Some(2));
}

#[test]
fn strategy_comparison_report() {
    let mut args = vec![
        "active-learn",
        "--strategy",
        "mc-dropout-variance,random",
        "--repeats",
        "2",
        "--max-iterations",
        "2",
    ];
    args.extend(al_args(&[]));
    let out = ok(&args);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let s = v["strategies"].as_array().unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!(s[0]["strategy"], "mc_dropout_variance");
    assert_eq!(s[1]["labels_to_target"].as_array().unwrap().len(), 2);
    assert_eq!(v["comparison"]["seeds"], json!([0, 1]));
}

#[test]
fn exit_codes_and_machine_readable_errors() {
    let dir = TempDir::new().unwrap();
    let out = mcref(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");

    let ckpt = p(&dir, "x.json");
    let out = mcref(&["train", "--checkpoint", &ckpt, "--alpha", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("alpha"));

    let out = mcref(&["mc-predict", "--checkpoint", &p(&dir, "missing.json")]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "io");

    let bad_csv = p(&dir, "bad.csv");
    std::fs::write(&bad_csv, "label,f0\n0,1.0\n1,oops\n").unwrap();
    let out = mcref(&[
        "train",
        "--data",
        "csv",
        "--csv",
        &bad_csv,
        "--checkpoint",
        &ckpt,
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "parse");

    let cfg = p(&dir, "bad.cfg");
    std::fs::write(&cfg, "this is not a config").unwrap();
    let out = mcref(&["--config", &cfg, "train", "--checkpoint", &ckpt]);
    assert_eq!(out.status.code(), Some(2));

    let out = mcref(&["export-report", "--input", &bad_csv]);
    assert_eq!(out.status.code(), Some(2));

    let out = mcref(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let help = String::from_utf8(out.stdout).unwrap();
    for cmd in [
        "train",
        "mc-predict",
        "sweep-threshold",
        "referral-curve",
        "grid-dropout",
        "active-learn",
        "serve",
        "export-report",
    ] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let dir = TempDir::new().unwrap();
    let json_cfg = p(&dir, "c.json");
    std::fs::write(
        &json_cfg,
        r#"{"seed": 4, "samples": 200, "epochs": 3, "hidden": [8, 4], "no_standardize": true}"#,
    )
    .unwrap();
    let kv_cfg = p(&dir, "c.cfg");
    std::fs::write(
        &kv_cfg,
        "seed=4\nsamples = 200\nepochs=3\nhidden=8,4\nno-standardize=true\n",
    )
    .unwrap();

    let (c1, r1) = (p(&dir, "1.ckpt"), p(&dir, "1.json"));
    ok(&[
        "--config",
        &json_cfg,
        "train",
        "--checkpoint",
        &c1,
        "--out",
        &r1,
    ]);
    let (c2, r2) = (p(&dir, "2.ckpt"), p(&dir, "2.json"));
    ok(&[
        "train",
        "--config",
        &kv_cfg,
        "--checkpoint",
        &c2,
        "--out",
        &r2,
    ]);
    let (c3, r3) = (p(&dir, "3.ckpt"), p(&dir, "3.json"));
    ok(&[
        "--seed",
        "4",
        "train",
        "--samples",
        "200",
        "--epochs",
        "3",
        "--hidden",
        "8,4",
        "--no-standardize",
        "--checkpoint",
        &c3,
        "--out",
        &r3,
    ]);
    let a = json_of(Path::new(&r1));
    assert_eq!(a["epochs"].as_array().unwrap().len(), 3);
    assert_eq!(a["data"]["standardised"], false);
    for (x, y) in [(&r1, &r2), (&r1, &r3), (&c1, &c2), (&c1, &c3)] {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }

    let r4 = p(&dir, "4.json");
    ok(&[
        "--config",
        &json_cfg,
        "train",
        "--epochs",
        "5",
        "--checkpoint",
        &c1,
        "--out",
        &r4,
    ]);
    assert_eq!(
        json_of(Path::new(&r4))["epochs"].as_array().unwrap().len(),
        5
    );

    let unknown = p(&dir, "u.cfg");
    std::fs::write(&unknown, "no-such-option=1\n").unwrap();
    let out = mcref(&["--config", &unknown, "train", "--checkpoint", &c1]);
    assert_eq!(out.status.code(), Some(2));
}

/// Two Gaussian blobs written as CSV; returns the labels by row (= sample id).
fn blobs_csv(path: &Path, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::from("label,f0,f1\n");
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let shift = if c == 0 { -1.2 } else { 1.2 };
        let x: f64 = shift + rng.random_range(-1.5..1.5);
        let y: f64 = rng.random_range(-1.0..1.0);
        text.push_str(&format!("{c},{x},{y}\n"));
        labels.push(c);
    }
    std::fs::write(path, text).unwrap();
    labels
}

/// `None` once the service has shut down.
fn http(addr: &str, method: &str, path: &str, body: Option<&str>) -> Option<(u16, Value)> {
    let mut stream = TcpStream::connect(addr).ok()?;
    let body = body.unwrap_or("");
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).ok()?;
    let (head, payload) = raw.split_once("\r\n\r\n")?;
    let status = head.split_whitespace().nth(1)?.parse().unwrap();
    let value = if payload.is_empty() {
        Value::Null
    } else {
        serde_json::from_str(payload).unwrap()
    };
    Some((status, value))
}

#[test]
fn labels_over_http_match_the_simulated_oracle() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("blobs.csv");
    let truth = blobs_csv(&data, 240, 11);
    let data_s = data.to_str().unwrap();
    let common = [
        "--data",
        "csv",
        "--csv",
        data_s,
        "--passes",
        "10",
        "--hidden",
        "8",
        "--max-iterations",
        "2",
        "--target",
        "1.0",
        "--kappa",
        "5",
    ];

    let sim = p(&dir, "sim.json");
    let mut args = vec!["--seed", "9", "active-learn", "--out", &sim];
    args.extend(common);
    args.extend(FAST);
    ok(&args);

    let served = p(&dir, "served.json");
    let mut args: Vec<&str> = vec![
        "--seed",
        "9",
        "serve",
        "--bind",
        "127.0.0.1:0",
        "--exit-when-done",
        "--out",
        &served,
    ];
    args.extend(common);
    args.extend(FAST);
    let mut child = Command::new(env!("CARGO_BIN_EXE_mcref"))
        .args(&args)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    stderr.read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on http://")
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
        .to_owned();

    let deadline = Instant::now() + Duration::from_secs(120);
    let mut labelled = 0;
    let mut conflicts = 0;
    let mut phases = Vec::new();
    loop {
        assert!(Instant::now() < deadline, "service did not finish");
        let Some((_, status)) = http(&addr, "GET", "/status", None) else {
            break;
        };
        if phases.last() != Some(&status["phase"]) {
            phases.push(status["phase"].clone());
        }
        if status["phase"] == "finished" {
            assert_eq!(status["iteration"], 2);
            assert_eq!(status["stop_reason"], "max_iterations");
            break;
        }
        let Some((code, queue)) = http(&addr, "GET", "/queue?limit=3", None) else {
            break;
        };
        assert_eq!(code, 200);
        let items = queue.as_array().unwrap();
        assert!(items.len() <= 3);
        let sigmas: Vec<f64> = items
            .iter()
            .map(|i| i["scalar_uncertainty"].as_f64().unwrap())
            .collect();
        assert!(sigmas.windows(2).all(|w| w[0] >= w[1]));
        for item in items {
            let id = item["sample_id"].as_u64().unwrap();
            let body =
                json!({"sample_id": id, "label": truth[id as usize], "annotator_id": "test"})
                    .to_string();
            let (code, _) = http(&addr, "POST", "/labels", Some(&body)).unwrap();
            assert_eq!(code, 200);
            labelled += 1;
            // The service may finish right after the last label of a batch.
            if let Some((code, _)) = http(&addr, "POST", "/labels", Some(&body)) {
                assert_eq!(code, 409);
                conflicts += 1;
            }
        }
        if items.is_empty() {
            std::thread::sleep(Duration::from_millis(20));
        }
    }
    let status = child.wait().unwrap();
    assert!(status.success());
    assert_eq!(labelled, 10);
    assert!(conflicts >= 9);
    assert!(phases.contains(&json!("awaiting_labels")), "{phases:?}");

    let a = json_of(Path::new(&sim));
    let b = json_of(Path::new(&served));
    assert_eq!(a["final_state_digest"], b["final_state_digest"]);
    assert_eq!(a["history"], b["history"]);
}

#[test]
fn serve_rejects_comparisons() {
    let out = mcref(&[
        "serve",
        "--strategy",
        "random,least-confidence",
        "--bind",
        "127.0.0.1:0",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
