#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use conplan_planner::backend::{Script, ScriptBuilder};
use conplan_planner::{load_corpus, Action, IncidentRecord};

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../planner/fixtures/corpus")
}

pub fn ctu_path() -> PathBuf {
    corpus_dir().join("01-ctu-ransomware.json")
}

pub fn ctu() -> IncidentRecord {
    load_corpus(ctu_path()).unwrap().remove(0)
}

pub fn gt_action(record: &IncidentRecord, i: usize) -> Action {
    let a = &record.ground_truth.actions()[i];
    Action::generated(a.action_text.clone(), a.explanation.clone())
}

/// Ground-truth stages `from..` with unanimous lookaheads.
fn optimal_from(builder: ScriptBuilder, record: &IncidentRecord, from: usize) -> ScriptBuilder {
    let total = record.ground_truth.len();
    (from..total).fold(builder, |b, i| {
        let a = gt_action(record, i);
        let remaining = (total - i - 1) as f64;
        b.stage(&[a.clone(), a.clone(), a], &[remaining; 3])
    })
}

/// Stage 0 first yields lookaheads (10, 12, 11), then a unanimous set;
/// the rest of the plan is optimal.
pub fn abstain_once_script(record: &IncidentRecord) -> Script {
    let a = gt_action(record, 0);
    let b = ScriptBuilder::new().stage(&[a.clone(), a.clone(), a], &[10.0, 12.0, 11.0]);
    optimal_from(b, record, 0).build()
}

/// Stage 0 yields `dispersed` inconsistent sets before the optimal plan.
pub fn dispersed_then_optimal(record: &IncidentRecord, dispersed: usize) -> Script {
    let a = gt_action(record, 0);
    let b = (0..dispersed).fold(ScriptBuilder::new(), |b, _| {
        b.stage(&[a.clone(), a.clone(), a.clone()], &[10.0, 12.0, 11.0])
    });
    optimal_from(b, record, 0).build()
}

pub fn write_script(dir: &Path, name: &str, script: &Script) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, script.to_json_lines()).unwrap();
    path
}

pub fn conplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conplan"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
