mod common;

use std::path::Path;
use std::process::{Command, Output};

fn ctxsql(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxsql")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn run_eval_report_round_trip() {
    let w = common::build_world();
    let script = w.write_gold_echo_script();
    let out = w.path("run");
    let o = ctxsql(&[
        "run", "--dataset", s(&w.dev), "--tables", s(&w.tables), "--database-dir", s(&w.db_dir),
        "--output-dir", s(&out), "--cache-dir", s(&w.path("cache")), "--mock-script", s(&script),
        "--style", "CRp", "--label", "crp-mock",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains(&format!("{} predictions", w.turn_count())));
    for f in ["predictions.jsonl", "usage.json", "config.resolved.toml"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }

    let o = ctxsql(&[
        "eval", "--predictions", s(&out.join("predictions.jsonl")), "--dataset", s(&w.dev),
        "--tables", s(&w.tables), "--database-dir", s(&w.db_dir), "--out", s(&out), "--label", "CRp@mock",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("100.0"), "{}", text(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["ex"], 100.0);
    assert_eq!(report["ix"], 100.0);

    let o = ctxsql(&["report", s(&out)]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("CRp"));
}

#[test]
fn config_file_is_resolved_relative_to_itself() {
    let w = common::build_world();
    w.write_gold_echo_script();
    let cfg = w.path("exp.toml");
    std::fs::write(
        &cfg,
        "dataset = \"dev.json\"\ntables = \"tables.json\"\ndatabase_dir = \"database\"\noutput_dir = \"out\"\n\
         [run]\nstyle = \"TRp\"\n[llm]\nprovider = \"mock\"\nmock_script = \"gold_echo.json\"\n",
    )
    .unwrap();
    let o = ctxsql(&["run", "--config", s(&cfg), "--workers", "1"]);
    assert!(o.status.success(), "{}", text(&o));
    let resolved = std::fs::read_to_string(w.path("out").join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("style = \"TRp\""));
    assert!(resolved.contains("workers = 1"));
}

#[test]
fn missing_database_dir_fails() {
    let w = common::build_world();
    let script = w.write_gold_echo_script();
    let o = ctxsql(&[
        "run", "--dataset", s(&w.dev), "--tables", s(&w.tables), "--database-dir", s(&w.path("nowhere")),
        "--output-dir", s(&w.path("run")), "--mock-script", s(&script),
    ]);
    assert!(!o.status.success());
    assert!(text(&o).contains("database directory not found"), "{}", text(&o));
}

#[test]
fn unknown_style_is_a_usage_error() {
    let o = ctxsql(&["run", "--style", "XYZ"]);
    assert!(!o.status.success());
}

#[test]
fn ftdata_reports_bad_line() {
    let w = common::build_world();
    let recs = w.path("recs.jsonl");
    std::fs::write(
        &recs,
        "{\"db_id\":\"school\",\"question\":\"How old?\",\"sql\":\"SELECT Age FROM student\",\"gold_sql\":\"SELECT Age FROM student\"}\n\
         {\"db_id\":\"school\",\"question\":\"Who?\",\"sql\":\"SELECT Fname FROM student\",\"gold_sql\":\"\"}\n",
    )
    .unwrap();
    let o = ctxsql(&["ftdata", "--records", s(&recs), "--tables", s(&w.tables), "--out", s(&w.path("ft.jsonl"))]);
    assert!(!o.status.success());
    assert!(text(&o).contains("line 2"), "{}", text(&o));

    std::fs::write(
        &recs,
        "{\"db_id\":\"school\",\"question\":\"How old?\",\"sql\":\"SELECT Age FROM student\",\"gold_sql\":\"SELECT Age FROM student\"}\n\
         {\"db_id\":\"shop\",\"question\":\"Names?\",\"sql\":\"SELECT pid FROM product\",\"gold_sql\":\"SELECT name FROM product\"}\n",
    )
    .unwrap();
    let o = ctxsql(&["ftdata", "--records", s(&recs), "--tables", s(&w.tables), "--out", s(&w.path("ft.jsonl"))]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("correct/incorrect: 1/1"));
    assert!(w.path("ft.jsonl.job.json").is_file());
}

#[test]
fn eval_rejects_stray_predictions() {
    let w = common::build_world();
    let preds = w.path("p.jsonl");
    std::fs::write(
        &preds,
        "{\"interaction_id\":\"ghost\",\"turn_position\":1,\"status\":\"answered\",\"raw_response\":\"SELECT 1\",\"extracted_sql\":\"SELECT 1\"}\n",
    )
    .unwrap();
    let o = ctxsql(&["eval", "--predictions", s(&preds), "--dataset", s(&w.dev), "--tables", s(&w.tables), "--database-dir", s(&w.db_dir)]);
    assert!(!o.status.success());
    assert!(text(&o).contains("ghost"), "{}", text(&o));
}
