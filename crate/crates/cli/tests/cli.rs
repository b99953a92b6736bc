mod common;

use std::fs;

use common::*;
use conplan_cli::exit;
use conplan_cli::PlanArtifact;
use conplan_planner::events::read_log;
use conplan_planner::{EventBody, SessionStatus};

fn plan_args<'a>(dir: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec!["plan", "--out", dir];
    args.extend_from_slice(extra);
    args
}

fn read_plan(dir: &std::path::Path, id: &str) -> PlanArtifact {
    serde_json::from_str(&fs::read_to_string(dir.join(format!("{id}.plan.json"))).unwrap()).unwrap()
}

#[test]
fn scripted_plan_exits_zero_with_six_actions() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let ctu = ctu_path();
    let out = conplan(&plan_args(dir, &["--incident", ctu.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(exit::OK), "{}", stderr(&out));
    let plan = read_plan(tmp.path(), "ctu-ransomware-0");
    assert_eq!(plan.status, SessionStatus::Completed);
    assert_eq!(plan.actions.len(), 6);
    assert!(plan.actions.iter().all(|a| !a.explanation.is_empty()));
    let score = plan.score.unwrap();
    assert_eq!((score.recovery_time, score.ineffective_pct, score.failed), (6, 0.0, false));
    assert!(tmp.path().join("ctu-ransomware-0.events.jsonl").exists());

    // A second run refuses to clobber the session.
    let again = conplan(&plan_args(dir, &["--incident", ctu.to_str().unwrap()]));
    assert_eq!(again.status.code(), Some(exit::ERROR));
    assert!(stderr(&again).contains("--resume"));
}

#[test]
fn corpus_directory_needs_an_incident_id() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let corpus = corpus_dir();
    let out = conplan(&plan_args(dir, &["--incident", corpus.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(exit::ERROR));
    let out = conplan(&plan_args(
        dir,
        &["--incident", corpus.to_str().unwrap(), "--incident-id", "cic-ddos"],
    ));
    assert_eq!(out.status.code(), Some(exit::OK), "{}", stderr(&out));
}

#[test]
fn interrupted_run_resumes_from_persisted_cursor() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let r = ctu();
    let script = write_script(tmp.path(), "dispersed.jsonl", &dispersed_then_optimal(&r, 2));
    let ctu = ctu_path();
    let base = [
        "--incident",
        ctu.to_str().unwrap(),
        "--script",
        script.to_str().unwrap(),
        "--max-icl",
        "2",
    ];
    let first = conplan(&plan_args(dir, &base));
    assert_eq!(first.status.code(), Some(exit::INTERRUPTED), "{}", stderr(&first));
    let log = tmp.path().join("ctu-ransomware-0.events.jsonl");
    let before = read_log(&log).unwrap();
    let last = before.last().unwrap();
    assert!(matches!(
        last.body,
        EventBody::StatusChanged {
            to: SessionStatus::Interrupted,
            ..
        }
    ));

    let mut resume = base.to_vec();
    resume.push("--resume");
    let second = conplan(&plan_args(dir, &resume));
    assert_eq!(second.status.code(), Some(exit::OK), "{}", stderr(&second));
    let after = read_log(&log).unwrap();
    assert_eq!(&after[..before.len()], &before[..], "log is append-only");
    // The first set generated after resuming sits at (0, 2).
    let next_set = after[before.len()..]
        .iter()
        .find_map(|e| match &e.body {
            EventBody::CandidatesGenerated { candidates, .. } => Some((candidates.stage, candidates.icl_iteration)),
            _ => None,
        })
        .unwrap();
    assert_eq!(next_set, (0, 2));
    assert!(after
        .iter()
        .any(|e| matches!(e.body, EventBody::Resumed { icl_iteration: 2 })));
    let plan = read_plan(tmp.path(), "ctu-ransomware-0");
    assert_eq!(plan.actions.len(), 6);
    assert_eq!(plan.feedback_records, 2);
}

#[test]
fn resume_without_session_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let ctu = ctu_path();
    let out = conplan(&plan_args(dir, &["--incident", ctu.to_str().unwrap(), "--resume"]));
    assert_eq!(out.status.code(), Some(exit::ERROR));
}

#[test]
fn stage_cap_gives_failed_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let ctu = ctu_path();
    let out = conplan(&plan_args(dir, &["--incident", ctu.to_str().unwrap(), "--max-stages", "3"]));
    assert_eq!(out.status.code(), Some(exit::FAILED), "{}", stderr(&out));
    let plan = read_plan(tmp.path(), "ctu-ransomware-0");
    assert_eq!(plan.actions.len(), 3);
    assert!(plan.score.unwrap().failed);
}

#[test]
fn human_provider_parks_with_awaiting_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let r = ctu();
    let script = write_script(tmp.path(), "once.jsonl", &abstain_once_script(&r));
    let ctu = ctu_path();
    let out = conplan(&plan_args(
        dir,
        &[
            "--incident",
            ctu.to_str().unwrap(),
            "--script",
            script.to_str().unwrap(),
            "--provider",
            "human",
        ],
    ));
    assert_eq!(out.status.code(), Some(exit::AWAITING_FEEDBACK), "{}", stderr(&out));
    assert!(stdout(&out).contains("awaiting feedback on stage 0 iteration 0"));
}

#[test]
fn unreachable_backend_gives_backend_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    // Bind then drop a listener so the port is very likely closed.
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let config = tmp.path().join("engine.toml");
    fs::write(
        &config,
        format!(
            "persistence_path = \"sessions\"\n[backend]\nkind = \"remote_chat\"\nendpoint = \"http://127.0.0.1:{port}/v1/chat/completions\"\nmodel_name = \"m\"\nrequest_timeout_ms = 2000\nretry_budget = 0\n"
        ),
    )
    .unwrap();
    let ctu = ctu_path();
    let out = conplan(&[
        "plan",
        "--config",
        config.to_str().unwrap(),
        "--incident",
        ctu.to_str().unwrap(),
        "--mode",
        "live",
    ]);
    assert_eq!(out.status.code(), Some(exit::BACKEND), "{}", stderr(&out));
    // The session was persisted relative to the config file.
    assert!(tmp.path().join("sessions/ctu-ransomware-0.events.jsonl").exists());
}

#[test]
fn live_mode_requires_remote_backend() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let ctu = ctu_path();
    let out = conplan(&plan_args(dir, &["--incident", ctu.to_str().unwrap(), "--mode", "live"]));
    assert_eq!(out.status.code(), Some(exit::ERROR));
}

#[test]
fn crash_between_appends_resumes_to_identical_log() {
    let tmp = tempfile::tempdir().unwrap();
    let r = ctu();
    let script = write_script(tmp.path(), "once.jsonl", &abstain_once_script(&r));
    let ctu = ctu_path();
    let args = |dir: &str, resume: bool| {
        let mut v = vec![
            "plan".to_string(),
            "--out".into(),
            dir.to_string(),
            "--incident".into(),
            ctu.to_str().unwrap().to_string(),
            "--script".into(),
            script.to_str().unwrap().to_string(),
        ];
        if resume {
            v.push("--resume".into());
        }
        v
    };
    let reference_dir = tmp.path().join("reference");
    let a = args(reference_dir.to_str().unwrap(), false);
    let out = conplan(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(exit::OK), "{}", stderr(&out));
    let reference = fs::read_to_string(reference_dir.join("ctu-ransomware-0.events.jsonl")).unwrap();
    let lines: Vec<&str> = reference.lines().collect();

    // Cut after every complete append, and once mid-line.
    let mut cuts: Vec<String> = (1..lines.len())
        .map(|keep| lines[..keep].iter().map(|l| format!("{l}\n")).collect())
        .collect();
    let half = lines[3].len() / 2;
    cuts.push(format!("{}\n{}\n{}\n{}", lines[0], lines[1], lines[2], &lines[3][..half]));

    for (i, prefix) in cuts.iter().enumerate() {
        let dir = tmp.path().join(format!("cut-{i}"));
        fs::create_dir_all(&dir).unwrap();
        for name in ["ctu-ransomware-0.meta.json", "ctu-ransomware-0.script.jsonl"] {
            fs::copy(reference_dir.join(name), dir.join(name)).unwrap();
        }
        fs::write(dir.join("ctu-ransomware-0.events.jsonl"), prefix).unwrap();
        let a = args(dir.to_str().unwrap(), true);
        let out = conplan(&a.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(out.status.code(), Some(exit::OK), "cut {i}: {}", stderr(&out));
        let resumed = fs::read_to_string(dir.join("ctu-ransomware-0.events.jsonl")).unwrap();
        assert_eq!(resumed, reference, "cut {i} diverged");
    }
}

#[test]
fn calibrate_reports_order_statistic() {
    let tmp = tempfile::tempdir().unwrap();
    // 100 distinct scores in shuffled order; the 96th smallest is 0.96.
    let mut values: Vec<usize> = (1..=100).collect();
    values.reverse();
    values.swap(3, 70);
    let text: String = values.iter().map(|v| format!("{}\n", *v as f64 / 100.0)).collect();
    let path = tmp.path().join("scores.txt");
    fs::write(&path, format!("# calibration run\n{text}")).unwrap();
    let out = conplan(&["calibrate", "--scores", path.to_str().unwrap(), "--kappa", "0.05"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let s = stdout(&out);
    assert!(s.contains("order statistic index m: 96"), "{s}");
    assert!(s.contains("threshold: 0.96\n"), "{s}");
    assert!(s.contains("n: 100"));
    assert_eq!(s.lines().filter(|l| l.starts_with('[')).count(), 10);
}

#[test]
fn calibrate_small_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let three = tmp.path().join("three.txt");
    fs::write(&three, "0.2\n0.9\n0.5\n").unwrap();
    let out = conplan(&["calibrate", "--scores", three.to_str().unwrap(), "--kappa", "0.2"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("threshold: ALWAYS_ABSTAIN"));
    assert!(stdout(&out).contains("order statistic index m: 4"));

    let one = tmp.path().join("one.txt");
    fs::write(&one, "0.37 session 12\n").unwrap();
    let out = conplan(&["calibrate", "--scores", one.to_str().unwrap(), "--kappa", "0.5"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("threshold: 0.37\n"));
    assert!(stdout(&out).contains("order statistic index m: 1"));

    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "0.2\nnope\n").unwrap();
    let out = conplan(&["calibrate", "--scores", bad.to_str().unwrap(), "--kappa", "0.2"]);
    assert_eq!(out.status.code(), Some(exit::ERROR));
    assert!(stderr(&out).contains("line 2"));
}

#[test]
fn simulate_regret_bound_column() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("regret");
    let out = conplan(&[
        "simulate",
        "regret",
        "--arms",
        "10",
        "--constant",
        "1",
        "--horizon",
        "300",
        "--runs",
        "10",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(out_dir.join("regret.csv")).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["k", "mean_regret", "bound"]);
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let k: f64 = rec[0].parse().unwrap();
        let bound: f64 = rec[2].parse().unwrap();
        assert!((bound - (10.0 * k * k.ln()).sqrt()).abs() < 1e-9, "k={k}");
        rows += 1;
    }
    assert_eq!(rows, 299);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("regret.json")).unwrap()).unwrap();
    assert_eq!(summary["arms"], 10);
    assert!(summary["uniform_baseline_final_regret"].as_f64().unwrap() > summary["final_regret"].as_f64().unwrap());
}

#[test]
fn simulate_coverage_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let one = tmp.path().join("one");
    let out = conplan(&["simulate", "coverage", "--trials", "1", "--out", one.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(one.join("coverage.json")).unwrap()).unwrap();
    let rate = summary["empirical_rate"].as_f64().unwrap();
    assert!(rate == 0.0 || rate == 1.0);

    let cov_dir = tmp.path().join("cov_dir");
    let out = conplan(&[
        "simulate",
        "coverage",
        "--n",
        "100",
        "--kappa",
        "0.05",
        "--trials",
        "10000",
        "--seed",
        "3",
        "--out",
        cov_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cov_dir.join("coverage.json")).unwrap()).unwrap();
    let rate = summary["empirical_rate"].as_f64().unwrap();
    let ci = summary["ci_halfwidth"].as_f64().unwrap();
    assert!(rate <= 0.05 + ci, "rate {rate} ci {ci}");
    assert_eq!(summary["within_ci"], true);
    assert!(cov_dir.join("coverage.csv").exists());

    let bad = conplan(&["simulate", "coverage", "--sampler", "gauss", "--out", one.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(exit::ERROR));
    let bad = conplan(&["simulate", "coverage", "--trials", "0", "--out", one.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(exit::ERROR));
}

#[test]
fn evaluate_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let r = ctu();
    let scripts = tmp.path().join("scripts");
    fs::create_dir_all(&scripts).unwrap();
    write_script(&scripts, "ctu-ransomware.script.jsonl", &abstain_once_script(&r));
    let out_dir = tmp.path().join("eval");
    let corpus = corpus_dir();
    let out = conplan(&[
        "evaluate",
        "--corpus",
        corpus.to_str().unwrap(),
        "--seeds",
        "3",
        "--scripts",
        scripts.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(out_dir.join("eval.csv")).unwrap();
    assert_eq!(reader.records().count(), 9);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["per_incident"].as_array().unwrap().len(), 3);
    assert_eq!(report["failed_pct"], 0.0);
}

#[test]
fn config_file_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    fs::write(&config, "n_candidates = 1\n").unwrap();
    let ctu = ctu_path();
    let out = conplan(&["plan", "--config", config.to_str().unwrap(), "--incident", ctu.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(exit::ERROR));
    let out = conplan(&["plan"]);
    assert_eq!(out.status.code(), Some(exit::ERROR));
    let out = conplan(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}
