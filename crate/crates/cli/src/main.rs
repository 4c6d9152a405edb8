use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use skillstate::bench::{
    emit_report, load_graph_file, load_scenario, load_suite, phase_table_csv, read_text, run_suite,
    LoadError, ReportFormat, Scenario, SuiteError,
};
use skillstate::graph::{export_dot, prune_view, DotSource, PruneDepth};
use skillstate::planner::{
    plan_with_verification, AdversarialPlanner, AdversaryMode, ExternalConfig, ExternalPlanner,
    FailureReason, InFlightLimit, LoopConfig, OraclePlanner, Planner, PlanningFailed,
    ReplayPlanner, TaskSpec,
};
use skillstate::sim::{episode_streams, run_episode, MonitorResult, Outcome, SimError, Terminal};
use skillstate::verify::{verify, Plan};
use skillstate::{EmbodimentState, SkillId, SkillStateGraph};

#[derive(Debug, Parser)]
#[command(
    name = "skillstate",
    version,
    about = "Skill-state graph validation, planning, simulation and benchmarking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and validate a graph, scenario or suite file.
    Validate(ValidateArgs),
    /// Check a plan file against a graph from an initial state.
    Verify(VerifyArgs),
    /// Produce a verified plan for a task.
    Plan(PlanArgs),
    /// Run one seeded episode of a scenario task.
    Simulate(SimulateArgs),
    /// Run a benchmark suite and emit its report.
    Bench(BenchArgs),
    /// Write a graph or pruned view as Graphviz DOT.
    ExportDot(ExportDotArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Machine,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PlannerKind {
    Oracle,
    Adversarial,
    Replay,
    External,
}

#[derive(Debug, Clone, Copy)]
enum StepLimit {
    Bounded(usize),
    Unbounded,
}

fn parse_step_limit(s: &str) -> Result<StepLimit, String> {
    match s {
        "none" | "inf" | "∞" => Ok(StepLimit::Unbounded),
        _ => s
            .parse()
            .map(StepLimit::Bounded)
            .map_err(|_| format!("expected a step count or `none`, got {s:?}")),
    }
}

#[derive(Debug, Args)]
struct Output {
    /// Write data here instead of standard output.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "machine")]
    format: Format,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct ValidateTarget {
    #[arg(long, value_name = "PATH")]
    graph: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    scenario: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    suite: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[command(flatten)]
    target: ValidateTarget,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_name = "PATH")]
    graph: PathBuf,
    /// Initial state, e.g. "(pantry,null,null)".
    #[arg(long, value_name = "LITERAL")]
    state: String,
    #[arg(long, value_name = "PATH")]
    plan: PathBuf,
    /// Also require every consecutive pair to be a graph edge.
    #[arg(long)]
    check_adjacency: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct PlannerArgs {
    #[arg(long, value_enum, default_value = "oracle")]
    planner: PlannerKind,
    /// Plan file for the replay planner, one per attempt.
    #[arg(long = "plan", value_name = "PATH")]
    plans: Vec<PathBuf>,
    /// Corruption probability of the adversarial planner.
    #[arg(long, default_value_t = 0.5, value_name = "P")]
    invalid_rate: f64,
    /// Base URL of the chat-completion endpoint.
    #[arg(long, value_name = "URL")]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Request timeout in seconds.
    #[arg(long, value_name = "SECS")]
    timeout: Option<u64>,
    /// Environment variable holding the bearer token.
    #[arg(long, value_name = "NAME")]
    api_key_env: Option<String>,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long, value_name = "PATH", conflicts_with = "graph", requires = "task")]
    scenario: Option<PathBuf>,
    #[arg(long, requires = "scenario")]
    task: Option<String>,
    #[arg(long, value_name = "PATH", requires_all = ["state", "goals"])]
    graph: Option<PathBuf>,
    #[arg(long, value_name = "LITERAL")]
    state: Option<String>,
    /// Comma-separated goal skills, in order.
    #[arg(long, value_delimiter = ',')]
    goals: Vec<String>,
    #[arg(long, default_value = "")]
    instruction: String,
    #[command(flatten)]
    planner: PlannerArgs,
    #[arg(long, default_value_t = 2)]
    max_retries: usize,
    #[arg(long, value_name = "N|closure")]
    prune_depth: Option<PruneDepth>,
    #[arg(long)]
    check_adjacency: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_name = "PATH")]
    scenario: PathBuf,
    /// Task id; the first task when omitted.
    #[arg(long)]
    task: Option<String>,
    #[command(flatten)]
    planner: PlannerArgs,
    #[arg(long, value_enum)]
    closed_loop: Option<Switch>,
    #[arg(long, value_enum)]
    semantic_check: Option<Switch>,
    #[arg(long, value_name = "N|closure")]
    prune_depth: Option<PruneDepth>,
    #[arg(long)]
    max_retries: Option<usize>,
    #[arg(long, value_name = "N|none", value_parser = parse_step_limit)]
    step_limit: Option<StepLimit>,
    /// Recover through the planner instead of the graph search.
    #[arg(long)]
    replan_via_planner: bool,
    /// Episode seed; defaults to the scenario's failure-model seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_name = "PATH")]
    suite: PathBuf,
    /// Overrides the suite seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the episode count per cell.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Also write the phase table as CSV.
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct ExportDotArgs {
    #[arg(long, value_name = "PATH")]
    graph: PathBuf,
    /// Label nodes with preconditions and deltas.
    #[arg(long)]
    annotated: bool,
    /// Export the view pruned from this state.
    #[arg(long, value_name = "LITERAL")]
    state: Option<String>,
    #[arg(long, value_name = "N|closure", requires = "state")]
    prune_depth: Option<PruneDepth>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Internal(String),
    Usage(String),
    Negative(String),
    Diagnostics(String),
    Transport(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Internal(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Negative(_) => 3,
            Failure::Diagnostics(_) => 4,
            Failure::Transport(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Internal(m)
            | Failure::Usage(m)
            | Failure::Negative(m)
            | Failure::Diagnostics(m)
            | Failure::Transport(m) => m,
        }
    }
}

impl From<LoadError> for Failure {
    fn from(e: LoadError) -> Self {
        let mut text = e.to_string();
        if let LoadError::Graph { diagnostics, .. } = &e {
            for d in diagnostics {
                let _ = write!(text, "\n  {d}");
            }
        }
        Failure::Diagnostics(text)
    }
}

type Result<T, E = Failure> = std::result::Result<T, E>;

/// What a successful or negative run leaves behind: data for the output
/// stream and whether it counts as a negative result.
struct Done {
    data: String,
    negative: Option<String>,
}

impl Done {
    fn ok(data: String) -> Self {
        Self {
            data,
            negative: None,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (result, out) = match cli.command {
        Command::Validate(a) => (validate(&a), a.output.out),
        Command::Verify(a) => (verify_cmd(&a), a.output.out),
        Command::Plan(a) => (plan_cmd(&a), a.output.out),
        Command::Simulate(a) => (simulate(&a), a.output.out),
        Command::Bench(a) => (bench(&a), a.output.out),
        Command::ExportDot(a) => (dot(&a), a.out),
    };
    let failure = match result {
        Ok(done) => match write_data(out.as_deref(), &done.data) {
            Ok(()) => done.negative.map(Failure::Negative),
            Err(e) => Some(e),
        },
        Err(e) => Some(e),
    };
    match failure {
        None => ExitCode::SUCCESS,
        Some(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn write_data(out: Option<&Path>, data: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, data)
            .map_err(|e| Failure::Internal(format!("cannot write {}: {e}", path.display()))),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(data.as_bytes())
                .and_then(|()| stdout.flush())
                .map_err(|e| Failure::Internal(format!("cannot write output: {e}")))
        }
    }
}

fn pretty<T: serde::Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    text
}

fn parse_state(graph: &SkillStateGraph, literal: &str) -> Result<EmbodimentState> {
    let state: EmbodimentState = literal
        .parse()
        .map_err(|e| Failure::Usage(format!("--state {literal:?}: {e}")))?;
    if !graph.in_vocabulary(&state) {
        return Err(Failure::Diagnostics(format!(
            "state {state} names a location or object the graph does not declare"
        )));
    }
    Ok(state)
}

fn read_plan(path: &Path) -> Result<Plan> {
    read_text(path)?
        .parse()
        .map_err(|e| Failure::Diagnostics(format!("{}: {e}", path.display())))
}

fn validate(args: &ValidateArgs) -> Result<Done> {
    let t = &args.target;
    let (graph, summary) = if let Some(path) = &t.graph {
        let (graph, _) = load_graph_file(path)?;
        (graph, json!({ "graph": path }))
    } else if let Some(path) = &t.scenario {
        let s = load_scenario(path)?;
        let summary = json!({ "scenario": path, "tasks": s.file.tasks.len() });
        (s.graph, summary)
    } else {
        let path = t.suite.as_ref().expect("clap requires one target");
        let (config, path) = load_suite(path)?;
        let scenario_path = if config.scenario.is_absolute() {
            config.scenario.clone()
        } else {
            path.parent()
                .unwrap_or(Path::new("."))
                .join(&config.scenario)
        };
        let s = load_scenario(&scenario_path)?;
        let summary =
            json!({ "suite": path, "scenario": scenario_path, "tasks": s.file.tasks.len() });
        (s.graph, summary)
    };
    let mut summary = summary;
    let fields = summary.as_object_mut().expect("object literal");
    fields.insert("locations".into(), graph.locations().len().into());
    fields.insert("objects".into(), graph.objects().len().into());
    fields.insert("skills".into(), graph.skills().len().into());
    fields.insert("actions".into(), graph.actions().len().into());
    fields.insert("edges".into(), graph.edges().len().into());
    fields.insert(
        "edge_mode".into(),
        serde_json::to_value(graph.edge_mode()).expect("serializable"),
    );
    fields.insert("states".into(), graph.state_space_size().to_string().into());
    let data = match args.output.format {
        Format::Machine => pretty(&summary),
        Format::Human => {
            let mut line = String::from("ok:");
            for (key, value) in fields.iter() {
                let value = value
                    .as_str()
                    .map(str::to_string)
                    .unwrap_or_else(|| value.to_string());
                let _ = write!(line, " {key}={value}");
            }
            line.push('\n');
            line
        }
    };
    Ok(Done::ok(data))
}

fn verify_cmd(args: &VerifyArgs) -> Result<Done> {
    let (graph, _) = load_graph_file(&args.graph)?;
    let state = parse_state(&graph, &args.state)?;
    let plan = read_plan(&args.plan)?;
    let report = verify(&graph, &state, &plan, args.check_adjacency);
    let data = match args.output.format {
        Format::Machine => pretty(&report),
        Format::Human => {
            let mut text = format!("verdict: {:?}\n", report.verdict).to_lowercase();
            let _ = writeln!(text, "  0  {}", report.state_chain[0]);
            for (i, s) in report.state_chain.iter().enumerate().skip(1) {
                let _ = writeln!(text, "  {i}  {} -> {s}", plan.steps[i - 1]);
            }
            if let Some(c) = &report.conflict {
                let _ = writeln!(
                    text,
                    "conflict at step {} ({}): {:?}: {}",
                    c.index + 1,
                    c.skill,
                    c.kind,
                    c.detail
                );
            }
            text
        }
    };
    let negative = report
        .conflict
        .as_ref()
        .map(|c| format!("plan is infeasible at step {} ({})", c.index + 1, c.skill));
    Ok(Done { data, negative })
}

fn external_config(args: &PlannerArgs) -> ExternalConfig {
    let mut config = ExternalConfig::default();
    if let Some(url) = &args.endpoint {
        config.base_url = url.clone();
    }
    if let Some(model) = &args.model {
        config.model = model.clone();
    }
    if let Some(secs) = args.timeout {
        config.timeout_secs = secs;
    }
    if let Some(name) = &args.api_key_env {
        config.api_key_env = name.clone();
    }
    config
}

fn make_planner<'g>(
    args: &PlannerArgs,
    graph: &'g SkillStateGraph,
    seed: u64,
) -> Result<Box<dyn Planner + 'g>> {
    let (rng, _) = episode_streams(seed);
    Ok(match args.planner {
        PlannerKind::Oracle => Box::new(OraclePlanner::new(graph)),
        PlannerKind::Adversarial => {
            if !(0.0..=1.0).contains(&args.invalid_rate) {
                return Err(Failure::Usage("--invalid-rate must lie in [0, 1]".into()));
            }
            Box::new(AdversarialPlanner::new(
                graph,
                AdversaryMode::Random(args.invalid_rate),
                rng,
            ))
        }
        PlannerKind::Replay => {
            if args.plans.is_empty() {
                return Err(Failure::Usage(
                    "the replay planner needs at least one --plan".into(),
                ));
            }
            let plans = args
                .plans
                .iter()
                .map(|p| read_plan(p))
                .collect::<Result<Vec<_>>>()?;
            Box::new(ReplayPlanner::new(plans))
        }
        PlannerKind::External => {
            let config = external_config(args);
            let limit = InFlightLimit::new(config.max_in_flight);
            Box::new(ExternalPlanner::new(config, limit))
        }
    })
}

fn planning_failure(reason: &FailureReason, attempts: usize) -> Failure {
    match reason {
        FailureReason::Transport(m) => Failure::Transport(format!("external planner: {m}")),
        FailureReason::Timeout => Failure::Transport("external planner timed out".into()),
        FailureReason::RetriesExhausted => Failure::Negative(format!(
            "no candidate passed verification in {attempts} attempt(s)"
        )),
        FailureReason::NoPlan => Failure::Negative("no plan reaches the goals".into()),
        FailureReason::SearchBudgetExceeded => {
            Failure::Negative("plan search budget exceeded".into())
        }
    }
}

fn load_task(args: &PlanArgs) -> Result<(SkillStateGraph, TaskSpec)> {
    if let Some(path) = &args.scenario {
        let scenario = load_scenario(path)?;
        let id = args.task.as_deref().expect("clap requires --task");
        let task = scenario
            .task(id)
            .ok_or_else(|| Failure::Usage(format!("scenario has no task {id:?}")))?
            .spec();
        return Ok((scenario.graph, task));
    }
    let Some(path) = &args.graph else {
        return Err(Failure::Usage(
            "plan needs --scenario with --task, or --graph with --state and --goals".into(),
        ));
    };
    let (graph, _) = load_graph_file(path)?;
    let initial = parse_state(
        &graph,
        args.state.as_deref().expect("clap requires --state"),
    )?;
    let goal_skills = args
        .goals
        .iter()
        .map(|g| SkillId::new(g.as_str()).map_err(|e| Failure::Usage(format!("--goals: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let task = TaskSpec {
        goal_skills,
        instruction: args.instruction.clone(),
        initial,
    };
    task.validate(&graph)
        .map_err(|e| Failure::Diagnostics(e.to_string()))?;
    Ok((graph, task))
}

fn plan_cmd(args: &PlanArgs) -> Result<Done> {
    let (graph, task) = load_task(args)?;
    let mut planner = make_planner(&args.planner, &graph, args.seed)?;
    let config = LoopConfig {
        max_retries: args.max_retries,
        prune_depth: args.prune_depth,
        check_adjacency: args.check_adjacency,
        ..LoopConfig::default()
    };
    match plan_with_verification(planner.as_mut(), &graph, &task, &config) {
        Ok(outcome) => Ok(Done::ok(match args.output.format {
            Format::Machine => pretty(&outcome),
            Format::Human => outcome.plan.to_text(),
        })),
        Err(PlanningFailed { reason, transcript }) => {
            for (i, attempt) in transcript.iter().enumerate() {
                let what = match (&attempt.candidate, &attempt.report, &attempt.parse_error) {
                    (_, _, Some(e)) => e.to_string(),
                    (Some(plan), Some(report), _) => match &report.conflict {
                        Some(c) => format!("{plan} fails at step {}: {}", c.index + 1, c.detail),
                        None => format!("{plan} completes {} goal(s)", attempt.goals_completed),
                    },
                    _ => "no candidate".into(),
                };
                eprintln!("attempt {}: {what}", i + 1);
            }
            Err(planning_failure(&reason, transcript.len()))
        }
    }
}

fn simulate(args: &SimulateArgs) -> Result<Done> {
    let scenario: Scenario = load_scenario(&args.scenario)?;
    let task = match &args.task {
        Some(id) => scenario
            .task(id)
            .ok_or_else(|| Failure::Usage(format!("scenario has no task {id:?}")))?,
        None => scenario
            .file
            .tasks
            .first()
            .ok_or_else(|| Failure::Diagnostics("scenario has no tasks".into()))?,
    };
    let mut policy = scenario.file.policy.clone();
    if let Some(s) = args.closed_loop {
        policy.closed_loop = s.on();
    }
    if let Some(s) = args.semantic_check {
        policy.semantic_check = s.on();
    }
    if args.prune_depth.is_some() {
        policy.prune_depth = args.prune_depth;
    }
    if let Some(n) = args.max_retries {
        policy.max_retries = n;
    }
    match args.step_limit {
        Some(StepLimit::Bounded(n)) => policy.step_limit = Some(n),
        Some(StepLimit::Unbounded) => policy.step_limit = None,
        None => {}
    }
    policy.replan_via_planner |= args.replan_via_planner;
    let seed = args.seed.unwrap_or(scenario.file.failure_model.rng_seed);
    let (_, mut exec_rng) = episode_streams(seed);
    let mut planner = make_planner(&args.planner, &scenario.graph, seed)?;
    let world = scenario
        .world_for(task)
        .map_err(|e| Failure::Diagnostics(format!("task {}: {e}", task.id)))?;
    let trace = run_episode(
        &scenario.graph,
        &task.spec(),
        world,
        planner.as_mut(),
        &scenario.file.failure_model,
        &policy,
        &mut exec_rng,
    )
    .map_err(|e| match e {
        SimError::SearchBudgetExceeded(_) => Failure::Negative(e.to_string()),
        _ => Failure::Internal(e.to_string()),
    })?;
    if let Some(reason) = &trace.planning.failure {
        if matches!(reason, FailureReason::Transport(_) | FailureReason::Timeout) {
            return Err(planning_failure(reason, trace.planning.attempts));
        }
    }
    let data = match args.output.format {
        Format::Machine => pretty(&trace),
        Format::Human => {
            let mut text = format!("task {} from {}\n", task.id, trace.task.initial);
            if let Some(plan) = &trace.planning.plan {
                let _ = writeln!(
                    text,
                    "plan after {} attempt(s): {plan}",
                    trace.planning.attempts
                );
            }
            for e in &trace.events {
                let outcome = match &e.outcome {
                    Outcome::Success => "ok".to_string(),
                    Outcome::Deviation { observed, cause } => {
                        format!("deviation {cause:?} -> {observed}")
                    }
                };
                let monitor = match &e.monitor {
                    MonitorResult::Ok => String::new(),
                    MonitorResult::Deviation { layer, .. } => format!(" [{layer:?} monitor]"),
                };
                let _ = write!(text, "{:>3}  {}  {outcome}{monitor}", e.step, e.skill);
                if let Some(goal) = &e.goal_completed {
                    let _ = write!(text, "  goal {goal} done");
                }
                if let Some(r) = &e.replan {
                    let _ = write!(text, "  replan {}", r.spliced);
                }
                text.push('\n');
            }
            let _ = writeln!(text, "terminal: {:?}", trace.terminal);
            text
        }
    };
    let negative = match &trace.terminal {
        Terminal::Success => None,
        Terminal::Failure { mode, at_step, .. } => {
            Some(format!("episode failed: {mode:?} at step {at_step}"))
        }
    };
    Ok(Done { data, negative })
}

fn bench(args: &BenchArgs) -> Result<Done> {
    let (mut config, path) = load_suite(&args.suite)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.episodes {
        config.episodes = n;
    }
    config.validate()?;
    let report = run_suite(&config, &path, args.jobs.max(1)).map_err(|e| match e {
        SuiteError::Load(e) => Failure::from(e),
        SuiteError::Bench(e) => Failure::Internal(e.to_string()),
    })?;
    if let Some(csv) = &args.csv {
        write_data(Some(csv), &phase_table_csv(&report))?;
    }
    let format = match args.output.format {
        Format::Machine => ReportFormat::Machine,
        Format::Human => ReportFormat::Human,
    };
    Ok(Done::ok(emit_report(&report, format)))
}

fn dot(args: &ExportDotArgs) -> Result<Done> {
    let (graph, _) = load_graph_file(&args.graph)?;
    let text = match &args.state {
        Some(literal) => {
            let state = parse_state(&graph, literal)?;
            let view = prune_view(
                &graph,
                &state,
                args.prune_depth.unwrap_or(PruneDepth::Closure),
            );
            export_dot(DotSource::View(&view), args.annotated)
        }
        None => export_dot(DotSource::Graph(&graph), args.annotated),
    }
    .map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(Done::ok(text))
}
