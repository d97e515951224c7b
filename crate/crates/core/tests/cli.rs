use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_prognosis");
const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/corpus.v1.jsonl");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("PROGNOSIS_BACKEND_MODE")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn ingest_index_predict() {
    let dir = tempfile::tempdir().unwrap();
    let normalized = dir.path().join("corpus.jsonl");
    let out = run(&["ingest", "--corpus", CORPUS, "--out", p(&normalized)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["entries"], 25);

    let index = dir.path().join("corpus.idx");
    let out = run(&["index", "--corpus", p(&normalized), "--index", p(&index), "--dim", "256"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["dim"], 256);

    let case = format!("{FIXTURES}/synthetic8/case-03.json");
    let out = run(&["predict", "--case", &case, "--index", p(&index), "--k", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let result = json(&out);
    assert_eq!(result["label"], "excellent");
    assert_eq!(result["evidence"].as_array().unwrap().len(), 3);

    let again = run(&["predict", "--case", &case, "--index", p(&index), "--k", "3"]);
    assert_eq!(out.stdout, again.stdout, "predict is deterministic");

    let out = run(&["predict", "--case", &case, "--variant", "no-petct", "--backend", "mock"]);
    assert_eq!(code(&out), 0);
    assert_eq!(json(&out)["variant"], "no-petct");
}

#[test]
fn cohort_gen_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    let out = run(&["cohort-gen", "--seed", "42", "--n", "8", "--out", p(&cohort)]);
    assert_eq!(code(&out), 0);
    assert_eq!(json(&out).as_array().unwrap().len(), 8);

    let report = dir.path().join("out/report.json");
    let start = Instant::now();
    let out = run(&["evaluate", "--cohort", p(&cohort), "--variants", "full,no-rag,no-petct", "--report", p(&report), "--max-inflight", "2"]);
    assert!(start.elapsed() < Duration::from_secs(30));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(&report).unwrap(), out.stdout);
    let tsv = std::fs::read_to_string(report.with_extension("tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 3 * 8);
    let r = json(&out);
    let f1: Vec<f64> = r["variants"].as_array().unwrap().iter().map(|v| v["macro_f1"].as_f64().unwrap()).collect();
    assert!((f1[0] - 13.0 / 15.0).abs() < 1e-12);
    assert_eq!(&f1[1..], &[0.625, 0.75]);

    let shipped = run(&["evaluate", "--cohort", &format!("{FIXTURES}/synthetic8"), "--variants", "full,no-rag,no-petct"]);
    assert_eq!(shipped.stdout, out.stdout, "shipped fixture matches the generator");
}

#[test]
fn validation_errors_exit_1() {
    let case = format!("{FIXTURES}/synthetic8/case-00.json");
    assert_eq!(code(&run(&["predict", "--case", &case, "--k", "-1"])), 1);
    assert_eq!(code(&run(&["predict", "--case", &case, "--variant", "half"])), 1);
    assert_eq!(code(&run(&["predict", "--case", &case, "--bogus"])), 1);
    assert_eq!(code(&run(&["predict", "--case", &case, "--max-inflight", "0"])), 1);
    assert_eq!(code(&run(&["cohort-gen", "--seed", "1", "--n", "2", "--out", "/tmp/unused-cohort"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"patient_id": "x", "documents": [{"id": "d", "modality": "ehr_record", "text": ""}]}"#).unwrap();
    let out = run(&["predict", "--case", p(&bad)]);
    assert_eq!(code(&out), 1);
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());

    let config = dir.path().join("prognosis.toml");
    std::fs::write(&config, "max_chunk_chars = 3\n").unwrap();
    assert_eq!(code(&run(&["predict", "--case", &case, "--config", p(&config)])), 1);
}

#[test]
fn io_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(code(&run(&["ingest", "--corpus", p(&missing), "--out", p(&dir.path().join("o"))])), 2);
    assert_eq!(code(&run(&["index", "--corpus", p(&missing), "--index", p(&dir.path().join("i"))])), 2);
    let case = format!("{FIXTURES}/synthetic8/case-00.json");
    assert_eq!(code(&run(&["predict", "--case", &case, "--index", p(&missing)])), 2);
    assert_eq!(code(&run(&["predict", "--case", p(&missing)])), 2);
    assert_eq!(code(&run(&["evaluate", "--cohort", p(&missing), "--variants", "full"])), 2);
    assert_eq!(code(&run(&["predict", "--case", &case, "--config", p(&missing)])), 2);
}

#[test]
fn serve_answers_health() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let store = tempfile::tempdir().unwrap();
    let mut child = Command::new(BIN)
        .args(["serve", "--port", &port.to_string(), "--store", p(store.path())])
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let url = format!("http://127.0.0.1:{port}/api/health");
    let deadline = Instant::now() + Duration::from_secs(20);
    let body = loop {
        match reqwest::blocking::get(&url) {
            Ok(r) if r.status().is_success() => break r.json::<serde_json::Value>().unwrap(),
            _ if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(100)),
            other => {
                child.kill().ok();
                panic!("server did not come up: {other:?}");
            }
        }
    };
    child.kill().ok();
    child.wait().ok();
    assert_eq!(body["status"], "ok");
}
