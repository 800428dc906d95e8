//! `dias`: validate scenarios, predict processing times, simulate, sweep and
//! plan drop ratios.
//!
//! Machine-readable output goes to stdout (or `--out`). Failures print one
//! `CODE: message` line on stderr and exit 2 (schema), 3 (infeasible) or
//! 4 (runtime).

mod grid;

use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dias::deflator::{self, AccuracyCurve, DeflatorError, PlanResult, SearchGrid, SimulationPredictor, TargetSpec};
use dias::document::{
    summary_table, DocumentError, MetricsDocument, PolicyDoc, ScenarioDocument, SprintDoc,
};
use dias::presets;
use dias::simulator::{run, ArrivalSource, Estimate, Scenario, SimError, SimulationMetrics};
use dias::Execution;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "dias", version, about = "Priority cluster scheduling with differential approximation and sprinting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario document and report its offered load.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Analytic per-class processing-time table.
    Predict {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run replications and write a metrics document.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// Overrides the scenario seed; replication i uses seed + i.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write every job's lifecycle as JSON lines.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Replicate every point of a parameter grid; long-format output.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        /// `theta.<class>`, `timeout_s.<class>`, `target_utilization` or `slots`.
        #[arg(long = "grid", value_name = "KEY=V1,V2,...")]
        grid: Vec<String>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search drop ratios and sprint timeouts against latency and accuracy targets.
    Plan {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        /// `theta=...` (shared by all classes) and `timeout_s=...` (`none` allowed).
        #[arg(long = "grid", value_name = "KEY=V1,V2,...")]
        grid: Vec<String>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the summary table of a metrics document.
    Report {
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Print a named scenario document.
    Preset {
        /// One of `reference`, `three-priority`, `sprinting`; omit to list.
        name: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct Failure {
    exit: u8,
    code: String,
    message: String,
}

impl Failure {
    fn new(exit: u8, code: &str, message: impl std::fmt::Display) -> Self {
        Self {
            exit,
            code: code.into(),
            message: message.to_string(),
        }
    }

    fn schema(code: &str, message: impl std::fmt::Display) -> Self {
        Self::new(2, code, message)
    }
}

impl From<DocumentError> for Failure {
    fn from(e: DocumentError) -> Self {
        Failure::schema(e.code(), e)
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::HorizonTooShort => Failure::new(4, "HORIZON_TOO_SHORT", e),
            other => Failure::new(4, "RUNTIME", other),
        }
    }
}

impl From<DeflatorError> for Failure {
    fn from(e: DeflatorError) -> Self {
        match e {
            DeflatorError::PredictorFailure(s) => s.into(),
            DeflatorError::EmptyTable => Failure::new(4, "RUNTIME", e),
            other => Failure::schema("SCHEMA_INVALID", other),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

fn read(path: &Path) -> Outcome<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::new(4, "IO", format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Outcome<()> {
    let io = |e: std::io::Error| Failure::new(4, "IO", e);
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::new(4, "IO", format!("{}: {e}", p.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(io)?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n").map_err(io)?;
            }
            Ok(())
        }
    }
}

fn human(text: &str) {
    if std::io::stderr().is_terminal() {
        eprint!("{text}");
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn load(path: &Path, seed: Option<u64>) -> Outcome<(ScenarioDocument, Scenario)> {
    let mut doc = ScenarioDocument::from_json(&read(path)?)?;
    if let Some(s) = seed {
        doc.seed = s;
    }
    check_target(&doc)?;
    let scenario = doc.to_scenario()?;
    Ok((doc, scenario))
}

/// A utilization target at or above one is a well-formed but unstable request.
fn check_target(doc: &ScenarioDocument) -> Outcome<()> {
    match doc.target_utilization {
        Some(rho) if rho >= 1.0 && rho.is_finite() => Err(Failure::new(
            3,
            "INFEASIBLE_LOAD",
            format!("target utilization {rho} is not below 1"),
        )),
        _ => Ok(()),
    }
}

fn offered_load(s: &Scenario) -> Outcome<Option<f64>> {
    match s.arrivals {
        ArrivalSource::Mmap(_) => Ok(Some(s.offered_load()?)),
        ArrivalSource::Trace(_) => Ok(None),
    }
}

fn require_stable(s: &Scenario) -> Outcome<()> {
    match offered_load(s)? {
        Some(rho) if rho >= 1.0 => Err(Failure::new(3, "INFEASIBLE_LOAD", format!("offered load {rho:.4} is not below 1"))),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct ValidateReport {
    valid: bool,
    name: String,
    scenario_hash: String,
    seed: u64,
    policy: String,
    classes: Vec<String>,
    offered_load: Option<f64>,
}

fn cmd_validate(path: &Path) -> Outcome<()> {
    let (doc, s) = load(path, None)?;
    let report = ValidateReport {
        valid: true,
        name: doc.name.clone(),
        scenario_hash: doc.hash(),
        seed: doc.seed,
        policy: doc.policy.label(),
        classes: doc.classes.iter().map(|c| c.name.clone()).collect(),
        offered_load: offered_load(&s)?,
    };
    emit(None, &to_json(&report))?;
    require_stable(&s)
}

#[derive(Serialize)]
struct ClassPrediction {
    name: String,
    priority: u32,
    drop_map: f64,
    drop_reduce: f64,
    mean_s: f64,
    /// Absent for deterministic timing.
    scv: Option<f64>,
    p95_s: Option<f64>,
}

#[derive(Serialize)]
struct Prediction {
    scenario_hash: String,
    seed: u64,
    policy: String,
    offered_load: Option<f64>,
    classes: Vec<ClassPrediction>,
}

fn predict(doc: &ScenarioDocument, s: &Scenario) -> Outcome<Prediction> {
    let classes = s
        .classes
        .iter()
        .zip(&s.policy.drop_ratios)
        .map(|(c, d)| {
            let mean_s = c.mean_service(&s.cluster, *d)?;
            let (scv, p95_s) = match c.processing_ph(&s.cluster, *d)? {
                Some(ph) => (Some(ph.scv().map_err(SimError::from)?), Some(ph.quantile(0.95).map_err(SimError::from)?)),
                None => (None, None),
            };
            Ok(ClassPrediction {
                name: c.name.clone(),
                priority: c.priority,
                drop_map: d.map,
                drop_reduce: d.reduce,
                mean_s,
                scv,
                p95_s,
            })
        })
        .collect::<Outcome<Vec<_>>>()?;
    Ok(Prediction {
        scenario_hash: doc.hash(),
        seed: doc.seed,
        policy: doc.policy.label(),
        offered_load: offered_load(s)?,
        classes,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_text(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Outcome<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).map_err(|e| Failure::new(4, "IO", e))?;
    let bytes = w.into_inner().map_err(|e| Failure::new(4, "IO", e))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn cmd_predict(path: &Path, format: Format, out: Option<&Path>) -> Outcome<()> {
    let (doc, s) = load(path, None)?;
    let p = predict(&doc, &s)?;
    let text = match format {
        Format::Json => to_json(&p),
        Format::Csv => csv_text(|w| {
            w.write_record([
                "class", "priority", "drop_map", "drop_reduce", "mean_s", "scv", "p95_s", "offered_load", "seed",
                "scenario_hash",
            ])?;
            for c in &p.classes {
                w.write_record([
                    c.name.clone(),
                    c.priority.to_string(),
                    c.drop_map.to_string(),
                    c.drop_reduce.to_string(),
                    c.mean_s.to_string(),
                    opt(c.scv),
                    opt(c.p95_s),
                    opt(p.offered_load),
                    p.seed.to_string(),
                    p.scenario_hash.clone(),
                ])?;
            }
            Ok(())
        })?,
    };
    let mut table = format!("{:<12} {:>12} {:>8} {:>12}\n", "class", "mean_s", "scv", "p95_s");
    for c in &p.classes {
        table.push_str(&format!(
            "{:<12} {:>12.4} {:>8} {:>12}\n",
            c.name,
            c.mean_s,
            c.scv.map(|v| format!("{v:.4}")).unwrap_or("-".into()),
            c.p95_s.map(|v| format!("{v:.4}")).unwrap_or("-".into())
        ));
    }
    human(&table);
    emit(out, &text)
}

/// Runs `(scenario, seed)` jobs in parallel, keeping their order.
fn run_all(jobs: Vec<(usize, u64)>, scenarios: &[Scenario]) -> Outcome<Vec<SimulationMetrics>> {
    Execution::Parallel
        .map(jobs, |(i, seed)| run(&scenarios[i].with_seed(seed)))
        .into_iter()
        .map(|r| r.map_err(Failure::from))
        .collect()
}

#[derive(Serialize)]
struct EventLine<'a> {
    run_seed: u64,
    #[serde(flatten)]
    record: &'a dias::simulator::JobRecord,
}

fn cmd_simulate(path: &Path, runs: usize, seed: Option<u64>, out: Option<&Path>, events: Option<&Path>) -> Outcome<()> {
    if runs == 0 {
        return Err(Failure::schema("SCHEMA_INVALID", "--runs must be at least 1"));
    }
    let (doc, s) = load(path, seed)?;
    require_stable(&s)?;
    let jobs = (0..runs as u64).map(|i| (0, doc.seed + i)).collect();
    let metrics = run_all(jobs, std::slice::from_ref(&s))?;
    if let Some(p) = events {
        let mut text = String::new();
        for (i, m) in metrics.iter().enumerate() {
            for record in &m.log {
                let line = EventLine {
                    run_seed: doc.seed + i as u64,
                    record,
                };
                text.push_str(&serde_json::to_string(&line).expect("serializable"));
                text.push('\n');
            }
        }
        std::fs::write(p, text).map_err(|e| Failure::new(4, "IO", format!("{}: {e}", p.display())))?;
    }
    let document = MetricsDocument::new(&doc, metrics);
    human(&summary_table(&document));
    emit(out, &to_json(&document))
}

#[derive(Serialize)]
struct SweepRow {
    point: usize,
    #[serde(skip)]
    params: Vec<String>,
    class: String,
    metric: &'static str,
    mean: f64,
    half_width: f64,
    runs: usize,
    seed: u64,
    scenario_hash: String,
}

fn sweep_rows(point: usize, params: &[String], doc: &ScenarioDocument, runs: &[SimulationMetrics]) -> Vec<SweepRow> {
    let summary = dias::simulator::ReplicatedMetrics::from_runs(runs);
    let hash = doc.hash();
    let row = |class: &str, metric: &'static str, e: Estimate| SweepRow {
        point,
        params: params.to_vec(),
        class: class.into(),
        metric,
        mean: e.mean,
        half_width: e.half_width,
        runs: runs.len(),
        seed: doc.seed,
        scenario_hash: hash.clone(),
    };
    let mut rows = Vec::new();
    for c in &summary.classes {
        rows.push(row(&c.name, "mean_response_s", c.mean_response_s));
        rows.push(row(&c.name, "p95_response_s", c.p95_response_s));
        rows.push(row(&c.name, "mean_queueing_s", c.mean_queueing_s));
        rows.push(row(&c.name, "mean_execution_s", c.mean_execution_s));
    }
    rows.push(row("all", "resource_waste", summary.resource_waste));
    rows.push(row("all", "energy_j", summary.energy_j));
    rows.push(row("all", "sprint_time_s", summary.sprint_time_s));
    rows
}

fn cmd_sweep(path: &Path, specs: &[String], runs: usize, seed: Option<u64>, format: Format, out: Option<&Path>) -> Outcome<()> {
    if runs == 0 {
        return Err(Failure::schema("SCHEMA_INVALID", "--runs must be at least 1"));
    }
    let mut base = ScenarioDocument::from_json(&read(path)?)?;
    if let Some(s) = seed {
        base.seed = s;
    }
    let axes = grid::parse_axes(specs).map_err(|m| Failure::schema("SCHEMA_GRID", m))?;
    let points = grid::points(&axes);
    let mut docs = Vec::with_capacity(points.len());
    let mut scenarios = Vec::with_capacity(points.len());
    for p in &points {
        let doc = grid::apply(&base, &axes, p).map_err(|m| Failure::schema("SCHEMA_GRID", m))?;
        check_target(&doc)?;
        let s = doc.to_scenario()?;
        require_stable(&s)?;
        docs.push(doc);
        scenarios.push(s);
    }
    let jobs = (0..points.len())
        .flat_map(|i| (0..runs as u64).map(move |r| (i, base.seed + r)))
        .collect();
    let metrics = run_all(jobs, &scenarios)?;
    let mut rows = Vec::new();
    for (i, (p, chunk)) in points.iter().zip(metrics.chunks(runs)).enumerate() {
        let params: Vec<String> = axes.iter().zip(p).map(|(a, &j)| a.values[j].to_string()).collect();
        rows.extend(sweep_rows(i, &params, &docs[i], chunk));
    }
    let names: Vec<&str> = axes.iter().map(|a| a.name.as_str()).collect();
    let text = match format {
        Format::Csv => csv_text(|w| {
            let mut header = vec!["point"];
            header.extend(&names);
            header.extend(["class", "metric", "mean", "half_width", "runs", "seed", "scenario_hash"]);
            w.write_record(&header)?;
            for r in &rows {
                let mut rec = vec![r.point.to_string()];
                rec.extend(r.params.iter().cloned());
                rec.extend([
                    r.class.clone(),
                    r.metric.to_string(),
                    r.mean.to_string(),
                    r.half_width.to_string(),
                    r.runs.to_string(),
                    r.seed.to_string(),
                    r.scenario_hash.clone(),
                ]);
                w.write_record(&rec)?;
            }
            Ok(())
        })?,
        Format::Json => {
            let values: Vec<serde_json::Value> = rows
                .iter()
                .map(|r| {
                    let mut v = serde_json::to_value(r).expect("serializable");
                    let params: serde_json::Map<String, serde_json::Value> = names
                        .iter()
                        .zip(&r.params)
                        .map(|(n, p)| (n.to_string(), serde_json::Value::String(p.clone())))
                        .collect();
                    v["params"] = serde_json::Value::Object(params);
                    v
                })
                .collect();
            to_json(&values)
        }
    };
    emit(out, &text)
}

/// Targets file for `plan`: a target spec plus an optional accuracy curve.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetsDoc {
    classes: Vec<deflator::ClassTarget>,
    latency_weight: f64,
    accuracy_weight: f64,
    #[serde(default)]
    accuracy_curve: Option<AccuracyCurve>,
}

#[derive(Serialize)]
struct PlanDocument {
    scenario: String,
    scenario_hash: String,
    seed: u64,
    runs: usize,
    chosen_policy: PolicyDoc,
    #[serde(flatten)]
    plan: PlanResult,
}

fn plan_grid(specs: &[String], doc: &ScenarioDocument) -> Outcome<SearchGrid> {
    let mut theta = vec![0.0, 0.1, 0.2, 0.4];
    let mut timeouts: Vec<Option<f64>> = vec![None];
    for spec in specs {
        let bad = |m: String| Failure::schema("SCHEMA_GRID", m);
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| bad(format!("grid entry `{spec}` is not key=v1,v2,...")))?;
        let parse = |v: &str| v.trim().parse::<f64>().ok().filter(|x| x.is_finite());
        match key.trim() {
            "theta" => {
                theta = values
                    .split(',')
                    .map(|v| parse(v).ok_or_else(|| bad(format!("bad theta `{v}`"))))
                    .collect::<Outcome<_>>()?
            }
            "timeout_s" => {
                timeouts = values
                    .split(',')
                    .map(|v| match v.trim() {
                        t if t.eq_ignore_ascii_case("none") => Ok(None),
                        t => parse(t).map(Some).ok_or_else(|| bad(format!("bad timeout `{t}`"))),
                    })
                    .collect::<Outcome<_>>()?
            }
            other => return Err(bad(format!("plan grid keys are theta and timeout_s, not `{other}`"))),
        }
    }
    let sprint = if timeouts.iter().any(Option::is_some) {
        let base = match &doc.policy {
            PolicyDoc::DiasFull { sprint, .. } => sprint.clone(),
            _ => presets::limited_sprint(doc.classes.len()),
        };
        Some(sprint_config(&base))
    } else {
        None
    };
    Ok(SearchGrid {
        theta,
        timeouts_s: timeouts,
        sprint,
    })
}

fn sprint_config(d: &SprintDoc) -> dias::simulator::SprintConfig {
    dias::simulator::SprintConfig {
        timeouts: d.timeouts_s.clone(),
        speed_factor: d.speed_factor,
        budget: d.budget_j,
        replenish_rate: d.replenish_rate_j_per_s,
        budget_cap: d.budget_cap_j,
    }
}

fn cmd_plan(path: &Path, targets: &Path, specs: &[String], runs: usize, seed: Option<u64>, out: Option<&Path>) -> Outcome<()> {
    if runs == 0 {
        return Err(Failure::schema("SCHEMA_INVALID", "--runs must be at least 1"));
    }
    let (doc, s) = load(path, seed)?;
    let t: TargetsDoc = serde_json::from_str(&read(targets)?).map_err(|e| Failure::schema("SCHEMA_PARSE", e))?;
    let spec = TargetSpec {
        classes: t.classes,
        latency_weight: t.latency_weight,
        accuracy_weight: t.accuracy_weight,
    };
    let curve = t.accuracy_curve.unwrap_or_default();
    let grid = plan_grid(specs, &doc)?;
    let predictor = SimulationPredictor {
        runs,
        exec: Execution::Parallel,
    };
    let result = deflator::plan(&s, &spec, &curve, &grid, &predictor, Execution::Parallel)?;
    let chosen = result.chosen.policy(grid.sprint.as_ref());
    let feasible = result.feasible;
    let document = PlanDocument {
        scenario: doc.name.clone(),
        scenario_hash: doc.hash(),
        seed: doc.seed,
        runs,
        chosen_policy: PolicyDoc::from_policy(&chosen),
        plan: result,
    };
    human(&format!(
        "chosen {} feasible {} ({} candidates)\n",
        document.chosen_policy.label(),
        feasible,
        document.plan.table.len()
    ));
    emit(out, &to_json(&document))?;
    if feasible {
        Ok(())
    } else {
        Err(Failure::new(
            3,
            "INFEASIBLE_TARGETS",
            format!("no candidate meets the targets; reporting least-violating {}", document.chosen_policy.label()),
        ))
    }
}

fn cmd_report(path: &Path) -> Outcome<()> {
    let doc: MetricsDocument = serde_json::from_str(&read(path)?).map_err(|e| Failure::schema("SCHEMA_PARSE", e))?;
    if doc.per_run.is_empty() {
        return Err(Failure::schema("SCHEMA_INVALID", "metrics document has no runs"));
    }
    emit(None, &summary_table(&doc))
}

fn cmd_preset(name: Option<&str>, out: Option<&Path>) -> Outcome<()> {
    match name {
        None => emit(out, &presets::NAMES.join("\n")),
        Some(n) => {
            let doc = presets::by_name(n).ok_or_else(|| {
                Failure::schema("SCHEMA_INVALID", format!("unknown preset `{n}`; known: {}", presets::NAMES.join(", ")))
            })?;
            emit(out, &doc.to_json())
        }
    }
}

fn configure_threads() -> Outcome<()> {
    let Ok(v) = std::env::var("DIAS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::schema("SCHEMA_INVALID", format!("DIAS_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::new(4, "RUNTIME", e))
}

fn dispatch(cli: Cli) -> Outcome<()> {
    configure_threads()?;
    match cli.command {
        Command::Validate { scenario } => cmd_validate(&scenario),
        Command::Predict { scenario, format, out } => cmd_predict(&scenario, format, out.as_deref()),
        Command::Simulate {
            scenario,
            runs,
            seed,
            out,
            events,
        } => cmd_simulate(&scenario, runs, seed, out.as_deref(), events.as_deref()),
        Command::Sweep {
            scenario,
            grid,
            runs,
            seed,
            format,
            out,
        } => cmd_sweep(&scenario, &grid, runs, seed, format, out.as_deref()),
        Command::Plan {
            scenario,
            targets,
            grid,
            runs,
            seed,
            out,
        } => cmd_plan(&scenario, &targets, &grid, runs, seed, out.as_deref()),
        Command::Report { metrics } => cmd_report(&metrics),
        Command::Preset { name, out } => cmd_preset(name.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message = f.message.replace(['\n', '\r'], " ");
            eprintln!("{}: {}", f.code, message);
            ExitCode::from(f.exit)
        }
    }
}
