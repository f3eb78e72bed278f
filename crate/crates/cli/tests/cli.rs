use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cystscribe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cystscribe"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn cystscribe")
}

fn status(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn fixtures(dir: &Path) {
    assert_eq!(status(&cystscribe(&["fixtures", "--out-dir", "fx"], dir)), 0);
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(status(&cystscribe(&["no-such-command"], dir.path())), 1);
    assert_eq!(status(&cystscribe(&["ingest", "--input", "x.jsonl"], dir.path())), 1);
    assert_eq!(status(&cystscribe(&["--help"], dir.path())), 0);
    let missing = cystscribe(
        &["filter", "--input", "absent.jsonl", "--output", "o.jsonl"],
        dir.path(),
    );
    assert_eq!(status(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.jsonl"));

    std::fs::write(dir.path().join("bad.toml"), "[run]\nmystery = 1\n").unwrap();
    let out = cystscribe(&["-c", "bad.toml", "cost"], dir.path());
    assert_eq!(status(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery"));
}

#[test]
fn ingest_reports_bad_lines_and_keeps_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let corpus = std::fs::read_to_string(dir.path().join("fx/corpus.jsonl")).unwrap();
    let mut lines: Vec<String> = corpus.lines().take(3).map(str::to_owned).collect();
    lines.push(lines[0].clone());
    lines.push("{\"report_id\": \"broken\"".into());
    lines.push(
        r#"{"report_id":"E1","patient_id":"P","modality":"CT","report_text":"  ","signature_date":"2020-01-01"}"#
            .into(),
    );
    std::fs::write(dir.path().join("mixed.jsonl"), lines.join("\n")).unwrap();

    let out = cystscribe(
        &["ingest", "--input", "mixed.jsonl", "--output", "clean.jsonl"],
        dir.path(),
    );
    assert_eq!(status(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    for line in ["mixed.jsonl:4:", "mixed.jsonl:5:", "mixed.jsonl:6:"] {
        assert!(stderr.contains(line), "{stderr}");
    }
    let clean = std::fs::read_to_string(dir.path().join("clean.jsonl")).unwrap();
    assert_eq!(clean.lines().count(), 3);
    assert_eq!(
        status(&cystscribe(
            &["ingest", "--input", "clean.jsonl", "--output", "again.jsonl"],
            dir.path()
        )),
        0
    );
}

#[test]
fn split_writes_patient_disjoint_files() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let args = [
        "split",
        "--input",
        "fx/corpus.jsonl",
        "--out-dir",
        "parts",
        "--train",
        "0.5",
        "--val",
        "0.25",
        "--test",
        "0.25",
        "--seed",
        "3",
    ];
    assert_eq!(status(&cystscribe(&args, dir.path())), 0);
    let mut patients = Vec::new();
    let mut reports = 0;
    for part in ["train", "val", "test"] {
        let text = std::fs::read_to_string(dir.path().join(format!("parts/{part}.jsonl"))).unwrap();
        let mut ids: Vec<String> = text
            .lines()
            .map(|l| {
                serde_json::from_str::<Value>(l).unwrap()["patient_id"]
                    .as_str()
                    .unwrap()
                    .to_owned()
            })
            .collect();
        reports += ids.len();
        ids.sort();
        ids.dedup();
        patients.push(ids);
    }
    assert_eq!(reports, 40);
    for (i, a) in patients.iter().enumerate() {
        for b in &patients[i + 1..] {
            assert!(a.iter().all(|p| !b.contains(p)));
        }
    }
    let bad = [
        "split",
        "--input",
        "fx/corpus.jsonl",
        "--out-dir",
        "p2",
        "--train",
        "0.9",
        "--val",
        "0.9",
    ];
    assert_eq!(status(&cystscribe(&bad, dir.path())), 1);
}

#[test]
fn unreachable_endpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    std::fs::write(
        dir.path().join("cfg.toml"),
        "[endpoint]\nbase_url = \"http://127.0.0.1:9/v1\"\nmodel = \"m\"\n\n[endpoint.retry]\nmax_attempts = 1\n",
    )
    .unwrap();
    let out = cystscribe(
        &[
            "-c",
            "cfg.toml",
            "extract",
            "--corpus",
            "fx/corpus.jsonl",
            "--runs",
            "runs",
            "--run-id",
            "down",
        ],
        dir.path(),
    );
    assert_eq!(status(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let failures = std::fs::read_to_string(dir.path().join("runs/down/failures.jsonl")).unwrap();
    assert_eq!(failures.lines().count(), 40);

    let out = cystscribe(
        &["extract", "--corpus", "fx/corpus.jsonl", "--runs", "runs"],
        dir.path(),
    );
    assert_eq!(status(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("[endpoint]"));
}

#[test]
fn replay_and_compare_runs() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    std::fs::write(
        dir.path().join("cfg.toml"),
        "[evaluate]\nn_boot = 0\nn_perm = 2000\nseed = 1\n",
    )
    .unwrap();
    let replay = |completions: &str, id: &str| {
        cystscribe(
            &[
                "-c",
                "cfg.toml",
                "replay",
                "--corpus",
                "fx/corpus.jsonl",
                "--completions",
                completions,
                "--runs",
                "runs",
                "--run-id",
                id,
            ],
            dir.path(),
        )
    };
    assert_eq!(status(&replay("fx/completions.jsonl", "good")), 2);

    // Every other report loses its completions.
    let degraded: Vec<String> = std::fs::read_to_string(dir.path().join("fx/completions.jsonl"))
        .unwrap()
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let mut row: Value = serde_json::from_str(l).unwrap();
            if i % 2 == 0 {
                row["completions"] = Value::Array(vec![Value::String("no json here".into())]);
            }
            row.to_string()
        })
        .collect();
    std::fs::write(dir.path().join("degraded.jsonl"), degraded.join("\n")).unwrap();
    assert_eq!(status(&replay("degraded.jsonl", "bad")), 2);
    assert_eq!(
        status(&replay("fx/completions.jsonl", "good")),
        1,
        "run ids are not reused"
    );

    let compare = |format: &str| {
        cystscribe(
            &[
                "-c",
                "cfg.toml",
                "evaluate",
                "--run",
                "runs/good",
                "--compare",
                "runs/bad",
                "--annotations",
                "fx/annotations.jsonl",
                "--format",
                format,
            ],
            dir.path(),
        )
    };
    let out = compare("json");
    assert_eq!(status(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["cases"], 40);
    let tests = report["tests"].as_array().unwrap();
    assert_eq!(tests.len(), 3);
    let paired = tests
        .iter()
        .find(|t| t["name"] == "permutation_field_correctness")
        .unwrap();
    assert!(paired["result"]["p_value"].as_f64().unwrap() < 0.01);
    assert_eq!(paired["result"]["rejected"], true);

    let text = String::from_utf8(compare("text").stdout).unwrap();
    assert!(text.starts_with("good vs bad on 40 reports"), "{text}");
    let csv = String::from_utf8(compare("csv").stdout).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let single = cystscribe(
        &[
            "evaluate",
            "--run",
            "runs/good",
            "--annotations",
            "fx/annotations.jsonl",
            "--format",
            "csv",
        ],
        dir.path(),
    );
    let csv = String::from_utf8(single.stdout).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("feature"), "{csv}");
}

#[test]
fn cost_table_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
[cost.fixed]
gpu_hours = 100
cpu_hours = 100
storage_gb = 256
storage_hours = 100

[[cost.models]]
name = "open-cot"
kind = "open"
seconds_per_report = 1.5

[[cost.models]]
name = "closed-cot"
kind = "closed"
seconds_per_report = 8
input_tokens_per_report = 8000
output_tokens_per_report = 2000
"#;
    std::fs::write(dir.path().join("cost.toml"), config).unwrap();
    let out = cystscribe(&["-c", "cost.toml", "cost", "--format", "json"], dir.path());
    assert_eq!(status(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table: Value = serde_json::from_slice(&out.stdout).unwrap();
    let fixed: f64 = table["fixed_cost"].as_str().unwrap().parse().unwrap();
    assert!((fixed - 354.0).abs() < 1.0, "{fixed}");
    let per_100 = |row: usize| {
        table["rows"][row]["cost_per_100"]
            .as_str()
            .unwrap()
            .parse::<f64>()
            .unwrap()
    };
    assert_eq!(per_100(0), 0.125);
    assert_eq!(per_100(1), 4.0);
    let text = String::from_utf8(cystscribe(&["-c", "cost.toml", "cost"], dir.path()).stdout).unwrap();
    assert!(text.contains("open-cot pays off against closed-cot after"), "{text}");

    assert_eq!(status(&cystscribe(&["cost"], dir.path())), 1);
}

fn http_get(url: &str, path: &str, token: &str) -> (u16, String) {
    use std::io::{Read, Write};
    let host = url.trim_start_matches("http://").trim_end_matches('/');
    let mut stream = std::net::TcpStream::connect(host).unwrap();
    write!(
        stream,
        "GET {path} HTTP/1.1\r\nHost: {host}\r\nAuthorization: Bearer {token}\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    let code = response[9..12].parse().unwrap();
    let body = response
        .split_once("\r\n\r\n")
        .map(|(_, b)| b.to_owned())
        .unwrap_or_default();
    (code, body)
}

#[test]
fn serve_reads_tokens_from_the_environment() {
    use cystscribe_core::risk::RiskCategory;
    use cystscribe_core::PclFeatureRecord;
    use cystscribe_reader::ReaderCase;
    use std::io::BufRead;

    let dir = tempfile::tempdir().unwrap();
    let study = dir.path().join("study");
    std::fs::create_dir(&study).unwrap();
    std::fs::write(
        study.join("study.toml"),
        "seed = 1\nadmin_token_env = \"CS_ADMIN\"\n[[readers]]\nid = \"r1\"\ntoken_env = \"CS_R1\"\n\
         [[readers]]\nid = \"r2\"\ntoken_env = \"CS_R2\"\n",
    )
    .unwrap();
    let case = ReaderCase {
        case_id: "C1".into(),
        report_text: "Pancreas: 9 mm cyst in the tail.".into(),
        model_features: PclFeatureRecord {
            size_mm: Some(9.0),
            ..Default::default()
        },
        model_category: RiskCategory::Category1LowRisk,
        model_source: "secret-model".into(),
    };
    std::fs::write(study.join("cases.jsonl"), serde_json::to_string(&case).unwrap() + "\n").unwrap();

    let mut child = Command::new(env!("CARGO_BIN_EXE_cystscribe"))
        .args(["serve", "--study", "study", "--port", "0"])
        .current_dir(dir.path())
        .env("CS_ADMIN", "admin-secret")
        .env("CS_R1", "r1-secret")
        .env("CS_R2", "r2-secret")
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = std::io::BufReader::new(child.stderr.take().unwrap()).lines();
    let banner = lines.next().unwrap().unwrap();
    let url = banner.rsplit(' ').next().unwrap().to_owned();

    let (code, body) = http_get(&url, "/api/readers/r1/next", "r1-secret");
    assert_eq!(code, 200, "{body}");
    assert!(body.contains("\"case_id\":\"C1\""), "{body}");
    assert!(!body.contains("secret-model"), "{body}");
    assert_eq!(http_get(&url, "/api/readers/r1/next", "r2-secret").0, 403);
    assert_eq!(http_get(&url, "/api/progress", "r1-secret").0, 401);
    assert_eq!(http_get(&url, "/api/progress", "admin-secret").0, 200);
    child.kill().unwrap();
    child.wait().unwrap();
}
