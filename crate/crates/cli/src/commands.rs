//! Command-line surface: `plan`, `calibrate`, `simulate`, `evaluate`, `serve`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use conplan_core::{
    calibrate, coverage_experiment, simulate_regret, simulate_regret_with, BanditEnv, BanditPolicy, BetaScores,
    CoverageResult, DiscreteScores, DomainError, ScoreSampler, UniformScores,
};
use conplan_planner::backend::{Script, ScriptedBackend};
use conplan_planner::feedback::DigitalTwinStub;
use conplan_planner::harness::EvalReport;
use conplan_planner::{
    load_corpus, score_plan, BackendDescriptor, BackendKind, EventLog, Gateway, GatewayError, IncidentRecord,
    NewSession, PlanError, PlanScore, Planner, ProviderKind, SessionRun, SessionStatus,
};
use serde::Serialize;
use thiserror::Error;
use tracing::info;

use crate::api::{router, AppState};
use crate::config::{ConfigError, EngineConfig, ThresholdSource};
use crate::scores::{read_scores, render_report, ScoresError};
use crate::store::{Advance, CreateSession, SessionStore, StoreError};

pub mod exit {
    pub const OK: i32 = 0;
    pub const ERROR: i32 = 1;
    pub const FAILED: i32 = 2;
    pub const INTERRUPTED: i32 = 3;
    pub const BACKEND: i32 = 4;
    pub const AWAITING_FEEDBACK: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scores(#[from] ScoresError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        let plan = match self {
            CliError::Plan(p) | CliError::Store(StoreError::Plan(p)) => Some(p),
            _ => None,
        };
        match (self, plan) {
            (CliError::Store(StoreError::Backend(_)), _) => exit::BACKEND,
            (_, Some(PlanError::Gateway(_))) => exit::BACKEND,
            _ => exit::ERROR,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "conplan", version, about = "Consistency-gated incident response planner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan a response to one incident.
    Plan(PlanArgs),
    /// Calibrate the abstention threshold from consistency scores.
    Calibrate(CalibrateArgs),
    /// Run a coverage or regret experiment.
    Simulate(SimulateArgs),
    /// Score scripted plans over a corpus.
    Evaluate(EvaluateArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Scripted,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderArg {
    DigitalTwinStub,
    Human,
}

impl From<ProviderArg> for ProviderKind {
    fn from(p: ProviderArg) -> Self {
        match p {
            ProviderArg::DigitalTwinStub => ProviderKind::DigitalTwinStub,
            ProviderArg::Human => ProviderKind::Human,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Engine configuration file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed abstention threshold; replaces the configured source.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub max_icl: Option<usize>,
    #[arg(long)]
    pub max_stages: Option<usize>,
}

impl Overrides {
    pub fn load(&self) -> Result<EngineConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => EngineConfig::load(path)?,
            None => EngineConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(gamma) = self.gamma {
            config.threshold = ThresholdSource::Fixed { gamma };
        }
        if let Some(k) = self.max_icl {
            config.max_icl_iterations = k;
        }
        if let Some(t) = self.max_stages {
            config.max_stages = t;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    /// Incident file, corpus file or corpus directory.
    #[arg(long)]
    pub incident: PathBuf,
    /// Which incident to plan when the path holds several.
    #[arg(long)]
    pub incident_id: Option<String>,
    #[arg(long, value_enum, default_value = "scripted")]
    pub mode: Mode,
    /// Scripted backend replies (JSON lines); defaults to the ground-truth plan.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "digital-twin-stub")]
    pub provider: ProviderArg,
    /// Defaults to `<incident_id>-<seed>`.
    #[arg(long)]
    pub session_id: Option<String>,
    /// Continue an existing session from its event log.
    #[arg(long)]
    pub resume: bool,
    /// Session directory; defaults to the configured persistence path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub kappa: f64,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(subcommand)]
    pub kind: SimulateKind,
}

#[derive(Debug, Clone, Subcommand)]
pub enum SimulateKind {
    /// Escape rate of the calibrated threshold on fresh scores.
    Coverage(CoverageArgs),
    /// Thompson-sampling regret against the bound curve.
    Regret(RegretArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CoverageArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0.05)]
    pub kappa: f64,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    /// `uniform`, `beta:A,B` or `discrete:V1,V2,...`.
    #[arg(long, default_value = "uniform")]
    pub sampler: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RegretArgs {
    #[arg(long, default_value_t = 10)]
    pub arms: usize,
    #[arg(long, default_value_t = 0.05)]
    pub low: f64,
    #[arg(long, default_value_t = 0.95)]
    pub high: f64,
    #[arg(long, default_value_t = 1000)]
    pub horizon: usize,
    #[arg(long, default_value_t = 200)]
    pub runs: usize,
    #[arg(long, default_value_t = 1.0)]
    pub constant: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Number of seeds per incident, starting at the configured seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Directory with `<incident_id>.script.jsonl` files; incidents
    /// without one replay their ground-truth plan.
    #[arg(long)]
    pub scripts: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Address to listen on; defaults to the configured one or 127.0.0.1:8080.
    #[arg(long)]
    pub bind: Option<String>,
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Plan(args) => plan(&args),
        Command::Calibrate(args) => calibrate_cmd(&args).map(|()| exit::OK),
        Command::Simulate(args) => simulate(&args).map(|()| exit::OK),
        Command::Evaluate(args) => evaluate(&args).map(|()| exit::OK),
        Command::Serve(args) => serve_cmd(&args).map(|()| exit::OK),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_incident(path: &Path, id: Option<&str>) -> Result<IncidentRecord, CliError> {
    let records = load_corpus(path).map_err(|e| CliError::Other(e.to_string()))?;
    match id {
        Some(id) => records
            .into_iter()
            .find(|r| r.incident_id == id)
            .ok_or_else(|| CliError::Usage(format!("no incident {id:?} in {}", path.display()))),
        None => match records.len() {
            1 => Ok(records.into_iter().next().expect("one record")),
            0 => Err(CliError::Usage(format!("no incidents in {}", path.display()))),
            n => Err(CliError::Usage(format!(
                "{} holds {n} incidents; pick one with --incident-id",
                path.display()
            ))),
        },
    }
}

fn read_script(path: &Path) -> Result<Script, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Script::from_json_lines(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn status_exit(status: SessionStatus) -> i32 {
    match status {
        SessionStatus::Completed => exit::OK,
        SessionStatus::Failed => exit::FAILED,
        SessionStatus::Interrupted => exit::INTERRUPTED,
        SessionStatus::AwaitingFeedback => exit::AWAITING_FEEDBACK,
        SessionStatus::Running => exit::ERROR,
    }
}

pub fn plan(args: &PlanArgs) -> Result<i32, CliError> {
    let config = args.overrides.load()?;
    let record = load_incident(&args.incident, args.incident_id.as_deref())?;
    let backend = match args.mode {
        Mode::Scripted => BackendDescriptor {
            kind: BackendKind::Scripted,
            ..config.backend.clone()
        },
        Mode::Live if config.backend.kind == BackendKind::RemoteChat => config.backend.clone(),
        Mode::Live => {
            return Err(CliError::Usage(
                "live mode needs a remote_chat backend in the config file".into(),
            ))
        }
    };
    if args.script.is_some() && args.mode == Mode::Live {
        return Err(CliError::Usage("--script only applies to scripted mode".into()));
    }
    let dir = args.out.clone().unwrap_or_else(|| config.persistence_path.clone());
    let store = SessionStore::open(&dir)?;
    let session_id = args
        .session_id
        .clone()
        .unwrap_or_else(|| format!("{}-{}", record.incident_id, config.seed));

    if store.contains(&session_id) {
        if !args.resume {
            return Err(CliError::Usage(format!(
                "session {session_id} already exists in {}; pass --resume to continue it",
                dir.display()
            )));
        }
        let snap = store.get(&session_id)?;
        info!(session = %session_id, stage = snap.session.stage, icl_iteration = snap.session.icl_iteration, "resuming");
        if snap.session.status == SessionStatus::Interrupted {
            store.resume(&session_id)?;
        }
    } else {
        if args.resume {
            return Err(CliError::Usage(format!("no session {session_id} in {} to resume", dir.display())));
        }
        let script = args.script.as_deref().map(read_script).transpose()?;
        store.create(CreateSession {
            session_id: session_id.clone(),
            settings: config.settings_for(backend.kind)?,
            seed: config.seed,
            provider: args.provider.into(),
            backend,
            script,
            record,
        })?;
    }

    let outcome = store.advance(&session_id, Advance::Run);
    // The plan artifact reflects whatever the log holds, even after an error.
    let snap = store.get(&session_id)?;
    let artifact = snap.plan();
    let plan_path = dir.join(format!("{session_id}.plan.json"));
    write_json(&plan_path, &artifact)?;
    outcome?;

    println!("session: {session_id}");
    println!("status: {}", artifact.status);
    for (i, action) in artifact.actions.iter().enumerate() {
        println!("{:>3}. {}", i + 1, action.action_text);
    }
    if let Some(score) = &artifact.score {
        println!(
            "recovery_time: {}  ineffective_pct: {:.1}  failed: {}",
            score.recovery_time, score.ineffective_pct, score.failed
        );
    }
    if let Some(p) = &snap.session.pending_feedback {
        println!(
            "awaiting feedback on stage {} iteration {}: {}",
            p.stage, p.icl_iteration, p.action.action_text
        );
    }
    println!("plan: {}", plan_path.display());
    println!("events: {}", store.events_path(&session_id).display());
    Ok(status_exit(artifact.status))
}

pub fn calibrate_cmd(args: &CalibrateArgs) -> Result<(), CliError> {
    let scores = read_scores(&args.scores)?;
    let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
    let model = calibrate(&values, args.kappa)?;
    print!("{}", render_report(&model, args.bins));
    Ok(())
}

fn parse_list(spec: &str) -> Result<Vec<f64>, CliError> {
    spec.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("not a number: {v:?}")))
        })
        .collect()
}

pub fn parse_sampler(spec: &str) -> Result<Box<dyn ScoreSampler>, CliError> {
    match spec.split_once(':') {
        None if spec == "uniform" => Ok(Box::new(UniformScores)),
        Some(("beta", params)) => match parse_list(params)?.as_slice() {
            [a, b] => Ok(Box::new(BetaScores::new(*a, *b)?)),
            _ => Err(CliError::Usage("beta sampler takes two parameters, e.g. beta:2,5".into())),
        },
        Some(("discrete", values)) => Ok(Box::new(DiscreteScores::new(parse_list(values)?)?)),
        _ => Err(CliError::Usage(format!(
            "unknown sampler {spec:?}; expected uniform, beta:A,B or discrete:V1,V2,..."
        ))),
    }
}

#[derive(Debug, Serialize)]
struct CoverageSummary<'a> {
    sampler: &'a str,
    seed: u64,
    #[serde(flatten)]
    result: &'a CoverageResult,
    three_sigma_limit: f64,
    within_ci: bool,
}

#[derive(Debug, Serialize)]
struct RegretSummary {
    arms: usize,
    reward_means: Vec<f64>,
    horizon: usize,
    runs: usize,
    constant: f64,
    seed: u64,
    final_regret: f64,
    final_bound: f64,
    first_bound_violation: Option<usize>,
    uniform_baseline_final_regret: f64,
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    match &args.kind {
        SimulateKind::Coverage(a) => {
            let sampler = parse_sampler(&a.sampler)?;
            let result = coverage_experiment(sampler.as_ref(), a.n, a.kappa, a.trials, a.seed)?;
            create_dir(&a.out)?;
            let csv_path = a.out.join("coverage.csv");
            let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::Other(e.to_string()))?;
            w.write_record(["n", "kappa", "trials", "escapes", "empirical_rate", "ci_halfwidth"])
                .and_then(|()| {
                    w.write_record([
                        result.n.to_string(),
                        result.kappa.to_string(),
                        result.trials.to_string(),
                        result.escapes.to_string(),
                        result.empirical_rate.to_string(),
                        result.ci_halfwidth.to_string(),
                    ])
                })
                .and_then(|()| w.flush().map_err(csv::Error::from))
                .map_err(|e| CliError::Other(e.to_string()))?;
            let summary = CoverageSummary {
                sampler: &a.sampler,
                seed: a.seed,
                result: &result,
                three_sigma_limit: result.three_sigma_limit(),
                within_ci: result.empirical_rate <= result.kappa + result.ci_halfwidth,
            };
            write_json(&a.out.join("coverage.json"), &summary)?;
            println!(
                "escape rate {:.5} over {} trials (kappa {}, 99% half-width {:.5}, 3-sigma limit {:.5})",
                result.empirical_rate,
                result.trials,
                result.kappa,
                result.ci_halfwidth,
                result.three_sigma_limit()
            );
        }
        SimulateKind::Regret(a) => {
            let env = BanditEnv::evenly_spaced(a.arms, a.low, a.high)?;
            let trace = simulate_regret(&env, a.horizon, a.runs, a.constant, a.seed)?;
            let baseline = simulate_regret_with(BanditPolicy::UniformRandom, &env, a.horizon, a.runs, a.constant, a.seed)?;
            create_dir(&a.out)?;
            let csv_path = a.out.join("regret.csv");
            let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::Other(e.to_string()))?;
            w.write_record(["k", "mean_regret", "bound"])
                .map_err(|e| CliError::Other(e.to_string()))?;
            for (k, regret, bound) in trace.rows() {
                w.write_record([k.to_string(), regret.to_string(), bound.to_string()])
                    .map_err(|e| CliError::Other(e.to_string()))?;
            }
            w.flush().map_err(|e| CliError::io(&csv_path, e))?;
            let summary = RegretSummary {
                arms: env.arms(),
                reward_means: env.reward_means().to_vec(),
                horizon: a.horizon,
                runs: a.runs,
                constant: a.constant,
                seed: a.seed,
                final_regret: trace.cumulative_at(a.horizon).unwrap_or(0.0),
                final_bound: trace.bound_at(a.horizon).unwrap_or(0.0),
                first_bound_violation: trace.first_bound_violation(),
                uniform_baseline_final_regret: baseline.cumulative_at(a.horizon).unwrap_or(0.0),
            };
            write_json(&a.out.join("regret.json"), &summary)?;
            println!(
                "regret at K={}: thompson {:.3}, uniform {:.3}, bound {:.3}; bound violated at: {}",
                a.horizon,
                summary.final_regret,
                summary.uniform_baseline_final_regret,
                summary.final_bound,
                summary
                    .first_bound_violation
                    .map_or_else(|| "none".to_string(), |k| k.to_string())
            );
        }
    }
    Ok(())
}

/// Runs one in-memory scripted session and scores the result.
pub fn evaluate_one(
    record: &IncidentRecord,
    script: Script,
    config: &EngineConfig,
    seed: u64,
) -> Result<PlanScore, CliError> {
    let settings = config.settings_for(BackendKind::Scripted)?;
    let stage_cap = settings.limits.max_stages;
    let new = NewSession::from_incident(format!("{}-{seed}", record.incident_id), record, settings, seed);
    let mut run = SessionRun::create(new, EventLog::in_memory())?;
    let gateway = Gateway::new(Arc::new(ScriptedBackend::new(script, seed)));
    let mut provider = DigitalTwinStub::new(record.ground_truth.clone());
    let mut planner = Planner::new(&gateway, &mut provider);
    match planner.run_plan(&mut run) {
        // A run that stops on an exhausted or failing backend is scored on
        // the actions it produced, which counts it as failed.
        Ok(_) | Err(PlanError::Gateway(GatewayError::Backend { .. } | GatewayError::GenerationExhausted { .. })) => {}
        Err(e) => return Err(e.into()),
    }
    Ok(score_plan(&run.session().accepted_actions, record, stage_cap))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let config = args.overrides.load()?;
    let records = load_corpus(&args.corpus).map_err(|e| CliError::Other(e.to_string()))?;
    let mut rows = Vec::new();
    for record in &records {
        let script = match &args.scripts {
            Some(dir) if dir.join(format!("{}.script.jsonl", record.incident_id)).exists() => {
                read_script(&dir.join(format!("{}.script.jsonl", record.incident_id)))?
            }
            _ => Script::optimal_plan(record, config.n_candidates),
        };
        for offset in 0..args.seeds {
            rows.push(evaluate_one(record, script.clone(), &config, config.seed + offset)?);
        }
    }
    let report = EvalReport::from_rows(rows);
    create_dir(&args.out)?;
    let csv_path = args.out.join("eval.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::Other(e.to_string()))?;
    for row in &report.rows {
        w.serialize(row).map_err(|e| CliError::Other(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    write_json(&args.out.join("eval.json"), &report)?;
    for agg in &report.per_incident {
        println!(
            "{}: recovery_time {:.2} ± {:.2}, ineffective {:.1}%, failed {:.1}% over {} runs",
            agg.incident_id,
            agg.recovery_time.mean,
            agg.recovery_time.std,
            agg.ineffective_pct.mean,
            agg.failed_pct,
            agg.runs
        );
    }
    Ok(())
}

pub fn serve_cmd(args: &ServeArgs) -> Result<(), CliError> {
    let config = match &args.config {
        Some(path) => EngineConfig::load(path)?,
        None => EngineConfig::default(),
    };
    let bind = args
        .bind
        .clone()
        .or_else(|| config.server.bind.clone())
        .unwrap_or_else(|| "127.0.0.1:8080".to_string());
    let store = Arc::new(SessionStore::open(&config.persistence_path)?);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Other(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .map_err(|e| CliError::Other(format!("cannot bind {bind}: {e}")))?;
        info!(%bind, store = %config.persistence_path.display(), "serving");
        let app = router(AppState::new(store, config));
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Other(e.to_string()))
    })
}
