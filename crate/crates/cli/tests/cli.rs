use std::path::Path;
use std::process::{Command, Output};

fn attachrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attachrec")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

fn record(id: &str, thread: &str, ts: i64, from: &str, to: &str, subject: &str, item: Option<&str>) -> String {
    let attachments = item.map_or(serde_json::json!([]), |i| serde_json::json!([{ "item_id": i }]));
    serde_json::json!({
        "message_id": id, "thread_id": thread, "timestamp": ts,
        "from": from, "to": [to], "subject": subject, "body": "some words here",
        "attachments": attachments,
    })
    .to_string()
}

#[test]
fn stage_order_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = attachrec(&["--out", out, "--seed", "1", "synth", "--items", "6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let corpus = dir.path().join("synthetic.jsonl");
    let o = attachrec(&["--out", out, "ingest", "--corpus", corpus.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = attachrec(&["--out", out, "evaluate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run index first"), "{}", stderr(&o));
}

#[test]
fn invalid_configuration_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[model]\ncontext_width = 4\n").unwrap();
    let o = attachrec(&["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("context width"));

    std::fs::write(&cfg, "[silver]\nbudget = 3\n").unwrap();
    let o = attachrec(&["--config", cfg.to_str().unwrap(), "config"]);
    assert_eq!(o.status.code(), Some(1));

    let o = attachrec(&["no-such-stage"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = attachrec(&["--out", out, "synth", "--items", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let corpus = dir.path().join("synthetic.jsonl");
    let o = attachrec(&["--out", out, "run", "--corpus", corpus.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("too few"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 5\n[silver]\nk = 4\n").unwrap();
    let o = attachrec(&["--config", cfg.to_str().unwrap(), "--seed", "9", "config"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("seed = 9"));
    assert!(text.contains("k = 4"));
}

#[test]
fn silver_budget_of_ten_scores_every_subset() {
    let dir = tempfile::tempdir().unwrap();
    let subject = "apricot basalt cobalt dahlia ember fjord garnet heron indigo juniper kestrel lagoon";
    let lines = [
        record("m1", "origin", 10, "ann@x.org", "bob@x.org", subject, Some("report.pdf")),
        record("m2", "other", 20, "bob@x.org", "ann@x.org", "unrelated chatter", None),
        record("m3", "ask", 100, "ann@x.org", "bob@x.org", subject, None),
        record("m4", "ask", 110, "bob@x.org", "ann@x.org", subject, Some("report.pdf")),
    ];
    let corpus = dir.path().join("corpus.in.jsonl");
    std::fs::write(&corpus, lines.join("\n") + "\n").unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    for args in [
        vec!["--out", out_s, "ingest", "--corpus", corpus.to_str().unwrap()],
        vec!["--out", out_s, "index"],
        vec!["--out", out_s, "mine"],
        vec!["--out", out_s, "silver", "--k", "10"],
    ] {
        let o = attachrec(&args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let m = manifest(&out);
    assert_eq!(m["stages"]["silver"]["notes"]["scored_candidates_per_pair"], serde_json::json!([1023]));
    assert!(m["stages"]["silver"]["inputs"]["corpus.jsonl"].is_string());
}
