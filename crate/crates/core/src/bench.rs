//! Scenario and suite files, seeded multi-episode runs, metrics and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::{load_graph, Diagnostic, PruneDepth, SkillStateGraph};
use crate::ids::{LocationId, ObjectId, SkillId};
use crate::planner::{
    AdversarialPlanner, AdversaryMode, ExternalConfig, ExternalPlanner, InFlightLimit,
    OraclePlanner, Planner, ReplayPlanner, TaskError, TaskSpec,
};
use crate::sim::{
    classify, episode_streams, mix_seed, run_episode, EpisodeTrace, FailureClass, FailureModel,
    ModelError, Policy, WorldError, WorldState,
};
use crate::state::EmbodimentState;
use crate::verify::Plan;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioTask {
    pub id: String,
    #[serde(default)]
    pub instruction: String,
    pub goal_skills: Vec<SkillId>,
    pub initial: EmbodimentState,
    /// Starting locations of objects not in a gripper.
    #[serde(default)]
    pub objects: BTreeMap<ObjectId, LocationId>,
}

impl ScenarioTask {
    pub fn spec(&self) -> TaskSpec {
        TaskSpec {
            goal_skills: self.goal_skills.clone(),
            instruction: self.instruction.clone(),
            initial: self.initial.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    /// Relative to the scenario file.
    pub graph: PathBuf,
    pub tasks: Vec<ScenarioTask>,
    #[serde(default)]
    pub failure_model: FailureModel,
    #[serde(default)]
    pub policy: Policy,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub graph: SkillStateGraph,
    pub graph_text: String,
    pub text: String,
    pub file: ScenarioFile,
}

impl Scenario {
    pub fn task(&self, id: &str) -> Option<&ScenarioTask> {
        self.file.tasks.iter().find(|t| t.id == id)
    }

    pub fn world_for(&self, task: &ScenarioTask) -> Result<WorldState, WorldError> {
        WorldState::new(&self.graph, task.initial.clone(), &task.objects)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("{path}: graph has {} diagnostic(s)", diagnostics.len())]
    Graph {
        path: PathBuf,
        diagnostics: Vec<Diagnostic>,
    },
    #[error("task {task}: {source}")]
    Task { task: String, source: TaskError },
    #[error("task {task}: {source}")]
    World { task: String, source: WorldError },
    #[error("duplicate task id {0}")]
    DuplicateTask(String),
    #[error("failure model: {0}")]
    Model(#[from] ModelError),
    #[error("suite: {0}")]
    Suite(String),
}

pub fn read_text(path: &Path) -> Result<String, LoadError> {
    std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_graph_file(path: &Path) -> Result<(SkillStateGraph, String), LoadError> {
    let text = read_text(path)?;
    let graph = load_graph(&text).map_err(|diagnostics| LoadError::Graph {
        path: path.to_path_buf(),
        diagnostics,
    })?;
    Ok((graph, text))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, LoadError> {
    serde_json::from_str(text).map_err(|e| LoadError::Syntax {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn relative_to(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(path)
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, LoadError> {
    let text = read_text(path)?;
    let file: ScenarioFile = parse_json(path, &text)?;
    let (graph, graph_text) = load_graph_file(&relative_to(path, &file.graph))?;
    file.failure_model.validate()?;
    let mut ids = std::collections::BTreeSet::new();
    for task in &file.tasks {
        if !ids.insert(task.id.as_str()) {
            return Err(LoadError::DuplicateTask(task.id.clone()));
        }
        task.spec()
            .validate(&graph)
            .map_err(|source| LoadError::Task {
                task: task.id.clone(),
                source,
            })?;
        WorldState::new(&graph, task.initial.clone(), &task.objects).map_err(|source| {
            LoadError::World {
                task: task.id.clone(),
                source,
            }
        })?;
    }
    Ok(Scenario {
        graph,
        graph_text,
        text,
        file,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlannerSpec {
    #[default]
    Oracle,
    Adversarial {
        /// Probability that an attempt is corrupted.
        #[serde(default)]
        invalid_rate: Option<f64>,
        /// Per-attempt corruption flags; the last one repeats.
        #[serde(default)]
        script: Option<Vec<bool>>,
    },
    /// Task id to plan files, replayed one per attempt.
    Replay {
        plans: BTreeMap<String, Vec<PathBuf>>,
    },
    External(ExternalConfig),
}

impl PlannerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            PlannerSpec::Oracle => "oracle",
            PlannerSpec::Adversarial { .. } => "adversarial",
            PlannerSpec::Replay { .. } => "replay",
            PlannerSpec::External(_) => "external",
        }
    }
}

/// One column of the policy matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyCell {
    pub closed_loop: bool,
    #[serde(default)]
    pub prune_depth: Option<PruneDepth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    /// Relative to the suite file.
    pub scenario: PathBuf,
    #[serde(default)]
    pub planner: PlannerSpec,
    /// Empty means the scenario policy alone.
    #[serde(default)]
    pub policies: Vec<PolicyCell>,
    pub episodes: usize,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the scenario policy.
    #[serde(default)]
    pub policy: Option<Policy>,
    /// Overrides the scenario failure model.
    #[serde(default)]
    pub failure_model: Option<FailureModel>,
    /// Task ids to run; all when absent.
    #[serde(default)]
    pub tasks: Option<Vec<String>>,
}

fn one() -> usize {
    1
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<(), LoadError> {
        if self.episodes == 0 {
            return Err(LoadError::Suite("episodes must be at least 1".into()));
        }
        if self.groups == 0 {
            return Err(LoadError::Suite("groups must be at least 1".into()));
        }
        if let Some(model) = &self.failure_model {
            model.validate()?;
        }
        if let PlannerSpec::Adversarial {
            invalid_rate: Some(p),
            ..
        } = &self.planner
        {
            if !(0.0..=1.0).contains(p) {
                return Err(LoadError::Suite(format!(
                    "invalid_rate {p} is not a probability"
                )));
            }
        }
        Ok(())
    }
}

pub fn load_suite(path: &Path) -> Result<(SuiteConfig, PathBuf), LoadError> {
    let text = read_text(path)?;
    let config: SuiteConfig = parse_json(path, &text)?;
    config.validate()?;
    Ok((config, path.to_path_buf()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalCounts {
    pub fle: usize,
    pub tle: usize,
    pub ptf: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupStat {
    pub group: usize,
    pub episodes: usize,
    pub task_success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellReport {
    pub task: String,
    pub goals: usize,
    pub closed_loop: bool,
    pub prune_depth: Option<PruneDepth>,
    pub episodes: usize,
    pub planning_successes: usize,
    pub planning_failures: usize,
    pub planning_success_rate: f64,
    pub candidates: usize,
    pub valid_candidates: usize,
    pub candidate_validity_rate: f64,
    /// Attempts used per episode: count of episodes.
    pub attempts_histogram: BTreeMap<usize, usize>,
    pub task_successes: usize,
    pub task_success_rate: f64,
    /// Entry k-1: fraction of episodes that completed the first k goals.
    pub phase_table: Vec<f64>,
    pub terminal: TerminalCounts,
    pub errors: usize,
    pub replans: usize,
    pub mean_prompt_bytes: f64,
    pub groups: Vec<GroupStat>,
    pub group_mean: f64,
    /// Population standard deviation over groups.
    pub group_std: f64,
}

impl CellReport {
    pub fn label(&self) -> String {
        let depth = self
            .prune_depth
            .map(|d| d.to_string())
            .unwrap_or_else(|| "full".into());
        format!(
            "{}/{}/{}",
            self.task,
            if self.closed_loop { "closed" } else { "open" },
            depth
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteReport {
    pub schema_version: u32,
    pub config_digest: String,
    pub planner: String,
    pub seed: u64,
    pub episodes: usize,
    pub groups: usize,
    pub cells: Vec<CellReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BenchError {
    #[error("phase table mixes traces of different tasks")]
    MixedTasks,
    #[error("cell {cell}: phase table increases at phase {phase}")]
    AttritionViolated { cell: String, phase: usize },
    #[error("cell {cell}: outcome counts sum to {counted}, expected {episodes}")]
    Conservation {
        cell: String,
        counted: usize,
        episodes: usize,
    },
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

/// Entry k-1 is the fraction of traces whose completed goals include the
/// first k goal skills.
pub fn phase_table(traces: &[&EpisodeTrace], task: &TaskSpec) -> Result<Vec<f64>, BenchError> {
    if traces.iter().any(|t| t.task != *task) {
        return Err(BenchError::MixedTasks);
    }
    let goals = &task.goal_skills;
    Ok((1..=goals.len())
        .map(|k| {
            if traces.is_empty() {
                return 0.0;
            }
            let hits = traces
                .iter()
                .filter(|t| t.goals_completed.len() >= k && t.goals_completed[..k] == goals[..k])
                .count();
            hits as f64 / traces.len() as f64
        })
        .collect())
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Everything one episode needs, resolved from the suite and scenario.
struct Prepared {
    scenario: Scenario,
    tasks: Vec<ScenarioTask>,
    cells: Vec<(usize, PolicyCell)>,
    policy: Policy,
    model: FailureModel,
    replay: BTreeMap<String, Vec<Plan>>,
    limit: std::sync::Arc<InFlightLimit>,
    digest: String,
}

fn prepare(config: &SuiteConfig, suite_path: &Path) -> Result<Prepared, LoadError> {
    config.validate()?;
    let scenario = load_scenario(&relative_to(suite_path, &config.scenario))?;
    let tasks: Vec<ScenarioTask> = match &config.tasks {
        None => scenario.file.tasks.clone(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                scenario
                    .task(id)
                    .cloned()
                    .ok_or_else(|| LoadError::Suite(format!("unknown task {id}")))
            })
            .collect::<Result<_, _>>()?,
    };
    let policy = config
        .policy
        .clone()
        .unwrap_or_else(|| scenario.file.policy.clone());
    let model = config
        .failure_model
        .clone()
        .unwrap_or_else(|| scenario.file.failure_model.clone());
    let matrix = if config.policies.is_empty() {
        vec![PolicyCell {
            closed_loop: policy.closed_loop,
            prune_depth: policy.prune_depth,
        }]
    } else {
        config.policies.clone()
    };
    let cells = (0..tasks.len())
        .flat_map(|t| matrix.iter().map(move |p| (t, *p)))
        .collect();

    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(config).expect("config serializes"));
    hasher.update([0]);
    hasher.update(&scenario.text);
    hasher.update([0]);
    hasher.update(&scenario.graph_text);
    let mut replay = BTreeMap::new();
    if let PlannerSpec::Replay { plans } = &config.planner {
        for (task, files) in plans {
            let mut list = Vec::new();
            for file in files {
                let path = relative_to(suite_path, file);
                let text = read_text(&path)?;
                hasher.update([0]);
                hasher.update(&text);
                let plan: Plan = text.parse().map_err(|e| LoadError::Syntax {
                    path: path.clone(),
                    message: format!("{e}"),
                })?;
                list.push(plan);
            }
            replay.insert(task.clone(), list);
        }
    }
    let max_in_flight = match &config.planner {
        PlannerSpec::External(c) => c.max_in_flight,
        _ => 1,
    };
    Ok(Prepared {
        digest: hex::encode(hasher.finalize()),
        scenario,
        tasks,
        cells,
        policy,
        model,
        replay,
        limit: InFlightLimit::new(max_in_flight),
    })
}

fn make_planner<'g>(
    spec: &PlannerSpec,
    prepared: &'g Prepared,
    task: &ScenarioTask,
    rng: ChaCha8Rng,
) -> Box<dyn Planner + 'g> {
    let graph = &prepared.scenario.graph;
    match spec {
        PlannerSpec::Oracle => Box::new(OraclePlanner::new(graph)),
        PlannerSpec::Adversarial {
            invalid_rate,
            script,
        } => {
            let mode = match (script, invalid_rate) {
                (Some(script), _) => AdversaryMode::Script(script.clone()),
                (None, rate) => AdversaryMode::Random(rate.unwrap_or(0.5)),
            };
            Box::new(AdversarialPlanner::new(graph, mode, rng))
        }
        PlannerSpec::Replay { .. } => Box::new(ReplayPlanner::new(
            prepared.replay.get(&task.id).cloned().unwrap_or_default(),
        )),
        PlannerSpec::External(config) => {
            Box::new(ExternalPlanner::new(config.clone(), prepared.limit.clone()))
        }
    }
}

/// Result of one episode; `Err` holds the error message.
pub type EpisodeResult = Result<EpisodeTrace, String>;

fn run_one(
    config: &SuiteConfig,
    prepared: &Prepared,
    cell: usize,
    episode: usize,
) -> EpisodeResult {
    let (task_index, matrix) = prepared.cells[cell];
    let task = &prepared.tasks[task_index];
    let (planner_rng, mut exec_rng) = episode_streams(mix_seed(config.seed, episode as u64));
    let policy = Policy {
        closed_loop: matrix.closed_loop,
        prune_depth: matrix.prune_depth,
        ..prepared.policy.clone()
    };
    let mut planner = make_planner(&config.planner, prepared, task, planner_rng);
    let world = prepared
        .scenario
        .world_for(task)
        .map_err(|e| e.to_string())?;
    run_episode(
        &prepared.scenario.graph,
        &task.spec(),
        world,
        planner.as_mut(),
        &prepared.model,
        &policy,
        &mut exec_rng,
    )
    .map_err(|e| e.to_string())
}

fn summarize(
    config: &SuiteConfig,
    graph: &SkillStateGraph,
    task: &ScenarioTask,
    matrix: PolicyCell,
    results: &[EpisodeResult],
) -> Result<CellReport, BenchError> {
    let spec = task.spec();
    let traces: Vec<&EpisodeTrace> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let errors = results.len() - traces.len();
    let mut terminal = TerminalCounts::default();
    let mut planning_failures = 0;
    let mut task_successes = 0;
    let mut attempts_histogram = BTreeMap::new();
    let (mut candidates, mut valid_candidates, mut replans) = (0, 0, 0);
    let mut prompt_bytes: Vec<usize> = Vec::new();
    for trace in &traces {
        *attempts_histogram
            .entry(trace.planning.attempts)
            .or_insert(0) += 1;
        candidates += trace.planning.attempts;
        valid_candidates += trace.planning.valid_candidates;
        prompt_bytes.extend(&trace.planning.prompt_bytes);
        replans += trace.replans();
        if trace.planning_failed() {
            planning_failures += 1;
            continue;
        }
        match classify(graph, trace) {
            None => task_successes += 1,
            Some(FailureClass::Fle) => terminal.fle += 1,
            Some(FailureClass::Tle) => terminal.tle += 1,
            Some(FailureClass::Ptf) => terminal.ptf += 1,
        }
    }
    let mut group_success = vec![(0usize, 0usize); config.groups];
    for (episode, result) in results.iter().enumerate() {
        let slot = &mut group_success[episode % config.groups];
        slot.0 += 1;
        if result.as_ref().is_ok_and(|t| t.is_success()) {
            slot.1 += 1;
        }
    }
    let groups: Vec<GroupStat> = group_success
        .iter()
        .enumerate()
        .map(|(group, (n, ok))| GroupStat {
            group,
            episodes: *n,
            task_success_rate: rate(*ok, *n),
        })
        .collect();
    let group_mean = groups.iter().map(|g| g.task_success_rate).sum::<f64>() / groups.len() as f64;
    let group_std = (groups
        .iter()
        .map(|g| (g.task_success_rate - group_mean).powi(2))
        .sum::<f64>()
        / groups.len() as f64)
        .sqrt();

    let episodes = results.len();
    let report = CellReport {
        task: task.id.clone(),
        goals: spec.goal_skills.len(),
        closed_loop: matrix.closed_loop,
        prune_depth: matrix.prune_depth,
        episodes,
        planning_successes: traces.len() - planning_failures,
        planning_failures,
        planning_success_rate: rate(traces.len() - planning_failures, episodes),
        candidates,
        valid_candidates,
        candidate_validity_rate: rate(valid_candidates, candidates),
        attempts_histogram,
        task_successes,
        task_success_rate: rate(task_successes, episodes),
        phase_table: phase_table(&traces, &spec)?,
        terminal,
        errors,
        replans,
        mean_prompt_bytes: if prompt_bytes.is_empty() {
            0.0
        } else {
            prompt_bytes.iter().sum::<usize>() as f64 / prompt_bytes.len() as f64
        },
        groups,
        group_mean,
        group_std,
    };
    if let Some(phase) = report.phase_table.windows(2).position(|w| w[1] > w[0]) {
        return Err(BenchError::AttritionViolated {
            cell: report.label(),
            phase: phase + 2,
        });
    }
    let counted =
        planning_failures + task_successes + terminal.fle + terminal.tle + terminal.ptf + errors;
    if counted != episodes {
        return Err(BenchError::Conservation {
            cell: report.label(),
            counted,
            episodes,
        });
    }
    Ok(report)
}

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}

/// Runs every (task, policy) cell for `config.episodes` episodes. Episode
/// `e` of every cell draws from the same seeds, derived from the suite seed
/// and `e`. `jobs` > 1 runs episodes on a worker pool; results are merged in
/// (cell, episode) order, so the report does not depend on it.
pub fn run_suite_with_traces(
    config: &SuiteConfig,
    suite_path: &Path,
    jobs: usize,
) -> Result<(SuiteReport, Vec<Vec<EpisodeResult>>), SuiteError> {
    let prepared = prepare(config, suite_path)?;
    let work: Vec<(usize, usize)> = (0..prepared.cells.len())
        .flat_map(|c| (0..config.episodes).map(move |e| (c, e)))
        .collect();
    let results: Vec<EpisodeResult> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| BenchError::Pool(e.to_string()))?;
        pool.install(|| {
            work.par_iter()
                .map(|&(c, e)| run_one(config, &prepared, c, e))
                .collect()
        })
    } else {
        work.iter()
            .map(|&(c, e)| run_one(config, &prepared, c, e))
            .collect()
    };
    let mut per_cell: Vec<Vec<EpisodeResult>> = Vec::with_capacity(prepared.cells.len());
    let mut iter = results.into_iter();
    for _ in 0..prepared.cells.len() {
        per_cell.push(iter.by_ref().take(config.episodes).collect());
    }
    let cells = prepared
        .cells
        .iter()
        .zip(&per_cell)
        .map(|((t, matrix), results)| {
            summarize(
                config,
                &prepared.scenario.graph,
                &prepared.tasks[*t],
                *matrix,
                results,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = SuiteReport {
        schema_version: SCHEMA_VERSION,
        config_digest: prepared.digest.clone(),
        planner: config.planner.kind().to_string(),
        seed: config.seed,
        episodes: config.episodes,
        groups: config.groups,
        cells,
    };
    Ok((report, per_cell))
}

pub fn run_suite(
    config: &SuiteConfig,
    suite_path: &Path,
    jobs: usize,
) -> Result<SuiteReport, SuiteError> {
    run_suite_with_traces(config, suite_path, jobs).map(|(report, _)| report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Machine,
    Human,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "machine" => Ok(ReportFormat::Machine),
            "human" => Ok(ReportFormat::Human),
            _ => Err(format!("unknown format {s:?}, expected machine or human")),
        }
    }
}

fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec());
    line(
        widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect(),
    );
    for row in rows {
        line(row.iter().map(String::as_str).collect());
    }
    out
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

pub fn emit_report(report: &SuiteReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Machine => {
            let mut text = serde_json::to_string_pretty(report).expect("report serializes");
            text.push('\n');
            text
        }
        ReportFormat::Human => {
            let mut out = format!(
                "planner {}  seed {}  episodes/cell {}  groups {}\nconfig {}\n\n",
                report.planner, report.seed, report.episodes, report.groups, report.config_digest
            );
            let header = [
                "cell",
                "plan%",
                "valid%",
                "success%",
                "mean±std%",
                "fle",
                "tle",
                "ptf",
                "err",
                "replans",
                "prompt",
            ];
            let rows: Vec<Vec<String>> = report
                .cells
                .iter()
                .map(|c| {
                    vec![
                        c.label(),
                        pct(c.planning_success_rate),
                        pct(c.candidate_validity_rate),
                        pct(c.task_success_rate),
                        format!("{}±{}", pct(c.group_mean), pct(c.group_std)),
                        c.terminal.fle.to_string(),
                        c.terminal.tle.to_string(),
                        c.terminal.ptf.to_string(),
                        c.errors.to_string(),
                        c.replans.to_string(),
                        format!("{:.0}", c.mean_prompt_bytes),
                    ]
                })
                .collect();
            out.push_str(&render_table(&header, &rows));
            out.push_str("\nphase success %\n");
            let phases = report
                .cells
                .iter()
                .map(|c| c.phase_table.len())
                .max()
                .unwrap_or(0);
            let mut header = vec!["cell".to_string()];
            header.extend((1..=phases).map(|k| format!("p{k}")));
            let rows: Vec<Vec<String>> = report
                .cells
                .iter()
                .map(|c| {
                    let mut row = vec![c.label()];
                    row.extend(
                        (0..phases)
                            .map(|k| c.phase_table.get(k).map(|x| pct(*x)).unwrap_or_default()),
                    );
                    row
                })
                .collect();
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            out.push_str(&render_table(&header, &rows));
            out.push_str("\nattempts histogram\n");
            let rows: Vec<Vec<String>> = report
                .cells
                .iter()
                .map(|c| {
                    let hist: Vec<String> = c
                        .attempts_histogram
                        .iter()
                        .map(|(k, v)| format!("{k}:{v}"))
                        .collect();
                    vec![c.label(), hist.join(" ")]
                })
                .collect();
            out.push_str(&render_table(&["cell", "attempts:episodes"], &rows));
            out
        }
    }
}

/// Phase table as CSV: one row per phase, one column per cell.
pub fn phase_table_csv(report: &SuiteReport) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["phase".to_string()];
    header.extend(report.cells.iter().map(CellReport::label));
    writer.write_record(&header).expect("in-memory write");
    let phases = report
        .cells
        .iter()
        .map(|c| c.phase_table.len())
        .max()
        .unwrap_or(0);
    for k in 0..phases {
        let mut row = vec![(k + 1).to_string()];
        row.extend(report.cells.iter().map(|c| {
            c.phase_table
                .get(k)
                .map(|x| x.to_string())
                .unwrap_or_default()
        }));
        writer.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("flush")).expect("utf-8")
}

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("report does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema version {0}")]
    Version(u32),
    #[error("{0}")]
    Invalid(String),
}

/// Parses a machine report and checks its structural invariants.
pub fn validate_report(text: &str) -> Result<SuiteReport, SchemaError> {
    let report: SuiteReport = serde_json::from_str(text)?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(SchemaError::Version(report.schema_version));
    }
    if report.config_digest.len() != 64
        || !report.config_digest.bytes().all(|b| b.is_ascii_hexdigit())
    {
        return Err(SchemaError::Invalid(
            "config_digest is not a sha256 hex digest".into(),
        ));
    }
    for cell in &report.cells {
        if cell.phase_table.len() != cell.goals {
            return Err(SchemaError::Invalid(format!(
                "{}: phase table length",
                cell.label()
            )));
        }
        if cell.phase_table.windows(2).any(|w| w[1] > w[0]) {
            return Err(SchemaError::Invalid(format!(
                "{}: phase table increases",
                cell.label()
            )));
        }
        let counted = cell.planning_failures
            + cell.task_successes
            + cell.terminal.fle
            + cell.terminal.tle
            + cell.terminal.ptf
            + cell.errors;
        if counted != cell.episodes {
            return Err(SchemaError::Invalid(format!(
                "{}: outcome counts",
                cell.label()
            )));
        }
    }
    Ok(report)
}
