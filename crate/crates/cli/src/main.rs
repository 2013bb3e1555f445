use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use fmc::analysis::{analyze, AnalysisContext, AnalysisSummary};
use fmc::experiment::{run_experiment, write_outputs, ExperimentConfig, ExperimentError};
use fmc::sim::{simulate_with, SimError, SimEvent, SimOptions};
use fmc::tracegen::{generate_task_set, generate_trace_with, mix_seed, GeneratorParams, TraceOptions, RNG_ALGORITHM};
use fmc::{McTaskSet, Rational, StrategyKind, WorkloadTrace};

/// Exit statuses.
const EXIT_NEGATIVE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "fmc", about = "Flexible mixed-criticality EDF-VD analysis and simulation")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the off-line schedulability analysis of a task set.
    Analyze {
        #[arg(long)]
        taskset: PathBuf,
        /// Mandatory LO utilization to reserve, e.g. `1/5` or `0.2`.
        #[arg(long)]
        u_man: Option<Rational>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Generate random task sets.
    Generate {
        #[arg(long)]
        u_bound: Rational,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Minimum number of HI tasks per set.
        #[arg(long)]
        min_hi: Option<usize>,
    },
    /// Generate a workload trace for a task set.
    Trace {
        #[arg(long)]
        taskset: PathBuf,
        #[arg(long)]
        horizon: Rational,
        #[arg(long, default_value_t = 0.1)]
        overrun_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Add up to this many time units of random delay between releases.
        #[arg(long)]
        sporadic_slack: Option<u32>,
    },
    /// Simulate a trace under a tuning strategy.
    Simulate {
        #[arg(long)]
        taskset: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "uniform")]
        strategy: StrategyKind,
        /// Report file; standard output when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write every scheduling event as one JSON object per line.
        #[arg(long)]
        emit_events: Option<PathBuf>,
        /// Per-task mandatory levels: a JSON object `{"id": level}`, inline
        /// or as a file path.
        #[arg(long)]
        z_man: Option<String>,
        /// Re-check every switch against the full admissibility condition.
        #[arg(long)]
        audit: bool,
    },
    /// Run a batch experiment.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for summary.csv, degradation.csv and result.json.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; defaults to the number of CPUs.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure { code: EXIT_INPUT, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Failure { code: EXIT_INTERNAL, message: message.into() }
    }
}

type CliResult = Result<u8, Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn write_output(path: Option<&Path>, contents: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, contents).map_err(|e| Failure::input(format!("{}: {e}", p.display()))),
        None => io::stdout().write_all(contents.as_bytes()).map_err(|e| Failure::input(e.to_string())),
    }
}

fn load_set(path: &Path) -> Result<McTaskSet, Failure> {
    McTaskSet::from_json(&read(path)?).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn num(r: &Rational) -> Value {
    json!(r.to_f64())
}

fn analysis_json(summary: &AnalysisSummary, set: &McTaskSet) -> Value {
    let exact = |r: &Rational| Value::String(r.to_string());
    let phi: BTreeMap<&str, Value> = summary
        .phi
        .iter()
        .map(|(id, p)| (id.as_str(), json!({ "value": p.to_f64(), "exact": p.to_string() })))
        .collect();
    let bounds: Vec<Value> = summary
        .direct_bounds
        .iter()
        .enumerate()
        .map(|(k, b)| json!({ "k": k, "value": b.to_f64(), "exact": b.to_string() }))
        .collect();
    json!({
        "tasks": set.len(),
        "hi_tasks": set.hi_indices().len(),
        "u_lo_lo": num(&summary.u_lo_lo),
        "u_lo_lo_exact": exact(&summary.u_lo_lo),
        "u_hi_lo": num(&summary.u_hi_lo),
        "u_hi_lo_exact": exact(&summary.u_hi_lo),
        "u_hi_hi": num(&summary.u_hi_hi),
        "u_hi_hi_exact": exact(&summary.u_hi_hi),
        "u_lo_man": num(&summary.u_lo_man),
        "u_lo_man_exact": exact(&summary.u_lo_man),
        "x": summary.x.as_ref().map(num),
        "x_exact": summary.x.as_ref().map(exact),
        "phi": phi,
        "margin_set": summary.margin_set,
        "compensation_set": summary.compensation_set,
        "lo_mode_test": summary.lo_mode_test,
        "feasibility_margin": summary.feasibility_margin.as_ref().map(num),
        "feasibility_margin_exact": summary.feasibility_margin.as_ref().map(exact),
        "feasibility_test": summary.feasibility_test,
        "feasible": summary.schedulable(),
        "classic_edfvd_test": summary.classic_edfvd_test,
        "worst_case_edf_fits": summary.worst_case_edf_fits,
        "direct_bounds": bounds,
        "notes": notes(summary),
        "error": summary.error,
    })
}

fn notes(summary: &AnalysisSummary) -> Vec<&'static str> {
    let mut notes = Vec::new();
    if summary.worst_case_edf_fits {
        notes.push("schedulable by plain worst-case EDF: u_LO^LO + u_HI^HI <= 1");
    }
    notes
}

fn analysis_text(summary: &AnalysisSummary) -> String {
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line(format!("u_LO^LO = {}", summary.u_lo_lo));
    line(format!("u_HI^LO = {}", summary.u_hi_lo));
    line(format!("u_HI^HI = {}", summary.u_hi_hi));
    line(format!("u_LO^man = {}", summary.u_lo_man));
    match &summary.x {
        Some(x) => line(format!("x = {x} ({})", x.to_f64())),
        None => line("x = undefined".into()),
    }
    for (id, p) in &summary.phi {
        let kind = if p.is_positive() { "margin" } else { "compensation" };
        line(format!("phi({id}) = {p} [{kind}]"));
    }
    line(format!("lo_mode_test: {}", summary.lo_mode_test));
    if let Some(m) = &summary.feasibility_margin {
        line(format!("feasibility margin = {m}"));
    }
    line(format!("feasibility_test: {}", summary.feasibility_test));
    line(format!("classic_edfvd_test: {}", summary.classic_edfvd_test));
    for (k, b) in summary.direct_bounds.iter().enumerate() {
        line(format!("worst-case u_LO^{k} bound = {b}"));
    }
    for note in notes(summary) {
        line(format!("note: {note}"));
    }
    if let Some(e) = &summary.error {
        line(format!("error: {e}"));
    }
    line(format!("verdict: {}", if summary.schedulable() { "schedulable" } else { "not schedulable" }));
    out
}

fn cmd_analyze(taskset: &Path, u_man: Option<Rational>, format: Format) -> CliResult {
    let set = load_set(taskset)?;
    if let Some(u) = &u_man {
        if u.is_negative() || u > set.u_lo_lo() {
            return Err(Failure::input(format!("--u-man {u} must lie in [0, u_LO^LO = {}]", set.u_lo_lo())));
        }
    }
    let summary = analyze(&set, u_man);
    let text = match format {
        Format::Json => serde_json::to_string_pretty(&analysis_json(&summary, &set)).unwrap() + "\n",
        Format::Text => analysis_text(&summary),
    };
    write_output(None, &text)?;
    Ok(if summary.schedulable() { 0 } else { EXIT_NEGATIVE })
}

fn cmd_generate(u_bound: Rational, count: usize, seed: u64, out: &Path, min_hi: Option<usize>) -> CliResult {
    fs::create_dir_all(out).map_err(|e| Failure::input(format!("{}: {e}", out.display())))?;
    for i in 0..count {
        let mut params = GeneratorParams::with_bound(u_bound.clone(), mix_seed(&[seed, i as u64]));
        if let Some(n) = min_hi {
            params.min_hi_tasks = n;
        }
        let set = generate_task_set(&params).map_err(|e| Failure::input(format!("set {i}: {e}")))?;
        let path = out.join(format!("taskset_{i:04}.json"));
        write_output(Some(&path), &(set.to_json() + "\n"))?;
        log::info!("wrote {} ({} tasks, {} HI)", path.display(), set.len(), set.hi_indices().len());
    }
    Ok(0)
}

fn cmd_trace(
    taskset: &Path,
    horizon: Rational,
    overrun_prob: f64,
    seed: u64,
    out: Option<&Path>,
    sporadic_slack: Option<u32>,
) -> CliResult {
    if !horizon.is_positive() {
        return Err(Failure::input("--horizon must be positive"));
    }
    if !(0.0..=1.0).contains(&overrun_prob) {
        return Err(Failure::input("--overrun-prob must be in [0, 1]"));
    }
    let set = load_set(taskset)?;
    let trace = generate_trace_with(&set, &horizon, overrun_prob, seed, &TraceOptions { sporadic_slack });
    write_output(out, &(trace.to_json() + "\n"))?;
    Ok(0)
}

fn mandatory_overrides(arg: &str) -> Result<BTreeMap<String, Rational>, Failure> {
    let text = if arg.trim_start().starts_with('{') { arg.to_owned() } else { read(Path::new(arg))? };
    serde_json::from_str(&text).map_err(|e| Failure::input(format!("--z-man: {e}")))
}

fn apply_overrides(set: McTaskSet, overrides: &BTreeMap<String, Rational>) -> Result<McTaskSet, Failure> {
    let mut tasks = set.tasks().to_vec();
    for (id, z) in overrides {
        let task = tasks
            .iter_mut()
            .find(|t| &t.id == id)
            .ok_or_else(|| Failure::input(format!("--z-man: unknown task `{id}`")))?;
        task.z_mandatory = z.clone();
    }
    McTaskSet::new(tasks).map_err(|e| Failure::input(format!("--z-man: {e}")))
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    taskset: &Path,
    trace_path: &Path,
    strategy: StrategyKind,
    report_path: Option<&Path>,
    events_path: Option<&Path>,
    z_man: Option<&str>,
    audit: bool,
) -> CliResult {
    let mut set = load_set(taskset)?;
    if let Some(arg) = z_man {
        set = apply_overrides(set, &mandatory_overrides(arg)?)?;
    }
    let trace = WorkloadTrace::from_json(&read(trace_path)?)
        .map_err(|e| Failure::input(format!("{}: {e}", trace_path.display())))?;
    trace.resolve(&set).map_err(|e| Failure::input(format!("{}: {e}", trace_path.display())))?;
    let summary = analyze(&set, None);
    if !summary.schedulable() {
        let reason = summary.error.unwrap_or_else(|| "feasibility test failed".into());
        return Err(Failure::input(format!("task set is not schedulable ({reason}); nothing to simulate")));
    }
    let ctx = AnalysisContext::for_set(&set).map_err(|e| Failure::input(e.to_string()))?;
    let mut tuner = strategy.tuner(&ctx, &set).map_err(|e| Failure::input(e.to_string()))?;

    let mut events = match events_path {
        Some(p) => Some(BufWriter::new(
            fs::File::create(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?,
        )),
        None => None,
    };
    let mut write_error: Option<io::Error> = None;
    let mut sink = |event: SimEvent| {
        if let Some(w) = events.as_mut() {
            if write_error.is_none() {
                let line = serde_json::to_string(&event).expect("events serialize");
                if let Err(e) = writeln!(w, "{line}") {
                    write_error = Some(e);
                }
            }
        }
    };
    let sink_ref: Option<&mut dyn FnMut(SimEvent)> = if events_path.is_some() { Some(&mut sink) } else { None };
    let result = simulate_with(&set, &ctx, &trace, tuner.as_mut(), &SimOptions { audit }, sink_ref);
    if let Some(e) = write_error {
        return Err(Failure::input(format!("event log: {e}")));
    }
    if let Some(mut w) = events {
        w.flush().map_err(|e| Failure::input(format!("event log: {e}")))?;
    }
    let report = result.map_err(|e| match e {
        SimError::Trace(_) => Failure::input(e.to_string()),
        SimError::Tuning(_) | SimError::Inadmissible { .. } => Failure::internal(e.to_string()),
    })?;
    log::info!(
        "{} jobs, {} mode switches, PFJ {:.3}%",
        report.hi_jobs + report.lo_jobs,
        report.mode_switch_events.len(),
        report.pfj
    );
    if !report.is_safe() {
        log::warn!(
            "{} HI deadline misses, {} LO budget misses",
            report.hi_deadline_misses,
            report.lo_budget_misses
        );
    }
    write_output(report_path, &(serde_json::to_string_pretty(&report).unwrap() + "\n"))?;
    Ok(0)
}

fn cmd_experiment(config_path: &Path, out: &Path, jobs: Option<usize>) -> CliResult {
    let config = ExperimentConfig::from_json(&read(config_path)?).map_err(|e| Failure::input(e.to_string()))?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Failure::input("--jobs must be positive"));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Failure::internal(e.to_string()))?;
    let classify = |e: ExperimentError| {
        if e.is_internal() {
            Failure::internal(e.to_string())
        } else {
            Failure::input(e.to_string())
        }
    };
    let result = pool.install(|| run_experiment(&config)).map_err(classify)?;
    write_outputs(&result, out).map_err(classify)?;
    for row in &result.summary {
        log::info!(
            "u_B={} {}: acceptance {:.3}, mean PFJ {:?}",
            row.u_bound,
            row.strategy,
            row.acceptance_ratio,
            row.mean_pfj
        );
    }
    Ok(0)
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Analyze { taskset, u_man, format } => cmd_analyze(&taskset, u_man, format),
        Command::Generate { u_bound, count, seed, out, min_hi } => cmd_generate(u_bound, count, seed, &out, min_hi),
        Command::Trace { taskset, horizon, overrun_prob, seed, out, sporadic_slack } => {
            cmd_trace(&taskset, horizon, overrun_prob, seed, out.as_deref(), sporadic_slack)
        }
        Command::Simulate { taskset, trace, strategy, report, emit_events, z_man, audit } => cmd_simulate(
            &taskset,
            &trace,
            strategy,
            report.as_deref(),
            emit_events.as_deref(),
            z_man.as_deref(),
            audit,
        ),
        Command::Experiment { config, out, jobs } => cmd_experiment(&config, &out, jobs),
    }
}

fn long_version() -> String {
    format!(
        "{}\ntarget: {}-{}\nprofile: {}\nrng: {RNG_ALGORITHM}",
        env!("CARGO_PKG_VERSION"),
        std::env::consts::ARCH,
        std::env::consts::OS,
        if cfg!(debug_assertions) { "debug" } else { "release" },
    )
}

fn main() -> ExitCode {
    let command = Cli::command().version(env!("CARGO_PKG_VERSION")).long_version(long_version());
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
