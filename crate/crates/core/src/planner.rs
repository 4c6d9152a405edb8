//! Planning: the search oracle, proposal strategies and the
//! propose/verify/feedback loop.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::graph::{prune_view, topo_view, PruneDepth, SkillCategory, SkillStateGraph, TopoView};
use crate::ids::SkillId;
use crate::state::EmbodimentState;
use crate::verify::{conflict_feedback, verify, Plan, VerificationReport};

pub const DEFAULT_NODE_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub goal_skills: Vec<SkillId>,
    #[serde(default)]
    pub instruction: String,
    pub initial: EmbodimentState,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TaskError {
    #[error("task has no goal skills")]
    NoGoals,
    #[error("goal skill {0} is not in the graph")]
    UnknownGoal(SkillId),
    #[error("initial state {0} uses names outside the graph vocabulary")]
    InitialOutsideVocabulary(EmbodimentState),
}

impl TaskSpec {
    pub fn validate(&self, graph: &SkillStateGraph) -> Result<(), TaskError> {
        if self.goal_skills.is_empty() {
            return Err(TaskError::NoGoals);
        }
        if let Some(goal) = self
            .goal_skills
            .iter()
            .find(|g| graph.skill(g.as_str()).is_none())
        {
            return Err(TaskError::UnknownGoal(goal.clone()));
        }
        if !graph.in_vocabulary(&self.initial) {
            return Err(TaskError::InitialOutsideVocabulary(self.initial.clone()));
        }
        Ok(())
    }
}

/// Number of goals completed, in order, by running `steps`: a goal counts
/// when its skill runs while it is the next outstanding goal.
pub fn goal_progress<S: AsRef<str>>(steps: &[S], goals: &[SkillId]) -> usize {
    let mut done = 0;
    for step in steps {
        if done < goals.len() && goals[done].as_str() == step.as_ref() {
            done += 1;
        }
    }
    done
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SearchError {
    #[error("no plan reaches the goals")]
    NoPlan,
    #[error("search expanded more than {cap} nodes")]
    SearchBudgetExceeded { cap: usize },
}

#[derive(Debug, Clone)]
pub struct SearchOptions<'a> {
    /// Restricts the search to these skills when given.
    pub allowed: Option<&'a BTreeSet<SkillId>>,
    pub node_cap: usize,
}

impl Default for SearchOptions<'_> {
    fn default() -> Self {
        Self {
            allowed: None,
            node_cap: DEFAULT_NODE_CAP,
        }
    }
}

pub fn search_plan(graph: &SkillStateGraph, task: &TaskSpec) -> Result<Plan, SearchError> {
    search_from(
        graph,
        &task.initial,
        &task.goal_skills,
        &SearchOptions::default(),
    )
}

/// Breadth-first search over (state, next goal index). Successors are
/// generated in id order and nodes are marked on first discovery, so the
/// first accepting node found ends the lexicographically smallest among the
/// shortest plans.
pub fn search_from(
    graph: &SkillStateGraph,
    initial: &EmbodimentState,
    goals: &[SkillId],
    options: &SearchOptions<'_>,
) -> Result<Plan, SearchError> {
    if goals.is_empty() {
        return Ok(Plan::default());
    }
    struct Node {
        state: EmbodimentState,
        done: usize,
        parent: usize,
        skill: Option<SkillId>,
    }
    let mut nodes = vec![Node {
        state: initial.clone(),
        done: 0,
        parent: usize::MAX,
        skill: None,
    }];
    let mut seen: HashMap<(EmbodimentState, usize), ()> = HashMap::new();
    seen.insert((initial.clone(), 0), ());
    let mut queue = VecDeque::from([0usize]);
    let mut expanded = 0usize;
    while let Some(at) = queue.pop_front() {
        expanded += 1;
        if expanded > options.node_cap {
            return Err(SearchError::SearchBudgetExceeded {
                cap: options.node_cap,
            });
        }
        let (state, done) = (nodes[at].state.clone(), nodes[at].done);
        for (skill, next) in graph.successors(&state) {
            if options.allowed.is_some_and(|a| !a.contains(&skill.id)) {
                continue;
            }
            let done_next = if goals[done] == skill.id {
                done + 1
            } else {
                done
            };
            if seen.insert((next.clone(), done_next), ()).is_some() {
                continue;
            }
            nodes.push(Node {
                state: next,
                done: done_next,
                parent: at,
                skill: Some(skill.id.clone()),
            });
            let index = nodes.len() - 1;
            if done_next == goals.len() {
                let mut steps = Vec::new();
                let mut cursor = index;
                while let Some(id) = &nodes[cursor].skill {
                    steps.push(id.clone());
                    cursor = nodes[cursor].parent;
                }
                steps.reverse();
                return Ok(Plan::from_ids(steps));
            }
            queue.push_back(index);
        }
    }
    Err(SearchError::NoPlan)
}

/// What a planner sees for one attempt.
#[derive(Debug, Clone, Copy)]
pub struct PlanRequest<'a> {
    pub task: &'a TaskSpec,
    pub view: &'a TopoView,
    pub state: &'a EmbodimentState,
    pub feedback: Option<&'a str>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailure {
    #[error("completion lacks the <<PLAN>> / <<END>> markers")]
    MissingSentinels,
    #[error("completion names unknown skill {0:?}")]
    UnknownSkill(String),
    #[error("completion contains no steps")]
    EmptyPlan,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Refusal {
    #[error("planner found no plan")]
    NoPlan,
    #[error("planner search budget exceeded")]
    SearchBudgetExceeded,
    #[error("planner timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("unusable completion: {0}")]
    Unparseable(ParseFailure),
}

pub trait Planner {
    fn name(&self) -> &'static str;
    fn propose(&mut self, request: &PlanRequest<'_>) -> Result<Plan, Refusal>;
}

/// Exact search restricted to the skills in the offered view.
#[derive(Debug, Clone)]
pub struct OraclePlanner<'g> {
    pub graph: &'g SkillStateGraph,
    pub node_cap: usize,
}

impl<'g> OraclePlanner<'g> {
    pub fn new(graph: &'g SkillStateGraph) -> Self {
        Self {
            graph,
            node_cap: DEFAULT_NODE_CAP,
        }
    }
}

fn view_skills(view: &TopoView) -> BTreeSet<SkillId> {
    view.node_ids().cloned().collect()
}

impl Planner for OraclePlanner<'_> {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn propose(&mut self, request: &PlanRequest<'_>) -> Result<Plan, Refusal> {
        let allowed = view_skills(request.view);
        let options = SearchOptions {
            allowed: Some(&allowed),
            node_cap: self.node_cap,
        };
        search_from(
            self.graph,
            request.state,
            &request.task.goal_skills,
            &options,
        )
        .map_err(|e| match e {
            SearchError::NoPlan => Refusal::NoPlan,
            SearchError::SearchBudgetExceeded { .. } => Refusal::SearchBudgetExceeded,
        })
    }
}

/// Plays back fixed plans, one per attempt; refuses once they run out.
#[derive(Debug, Clone, Default)]
pub struct ReplayPlanner {
    plans: VecDeque<Plan>,
}

impl ReplayPlanner {
    pub fn new(plans: impl IntoIterator<Item = Plan>) -> Self {
        Self {
            plans: plans.into_iter().collect(),
        }
    }
}

impl Planner for ReplayPlanner {
    fn name(&self) -> &'static str {
        "replay"
    }

    fn propose(&mut self, _request: &PlanRequest<'_>) -> Result<Plan, Refusal> {
        self.plans.pop_front().ok_or(Refusal::NoPlan)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    SwapAdjacent,
    DropNavigation,
    DuplicatePick,
    DuplicateStep,
}

/// Single-edit corruptions of `plan`, in a fixed order: adjacent swaps,
/// dropped navigation steps, duplicated picks, then duplicates of any step.
pub fn mutations(graph: &SkillStateGraph, plan: &Plan) -> Vec<(Mutation, Plan)> {
    let category = |id: &str| graph.skill(id).map(|s| s.category);
    let steps = &plan.steps;
    let mut out = Vec::new();
    for i in 1..steps.len() {
        if steps[i - 1] != steps[i] {
            let mut m = steps.clone();
            m.swap(i - 1, i);
            out.push((Mutation::SwapAdjacent, Plan { steps: m }));
        }
    }
    for (i, step) in steps.iter().enumerate() {
        if category(step) == Some(SkillCategory::Navigate) {
            let mut m = steps.clone();
            m.remove(i);
            out.push((Mutation::DropNavigation, Plan { steps: m }));
        }
    }
    for (kind, wanted) in [
        (Mutation::DuplicatePick, true),
        (Mutation::DuplicateStep, false),
    ] {
        for (i, step) in steps.iter().enumerate() {
            if (category(step) == Some(SkillCategory::Pick)) == wanted {
                let mut m = steps.clone();
                m.insert(i, step.clone());
                out.push((kind, Plan { steps: m }));
            }
        }
    }
    out
}

/// When the adversary corrupts a proposal.
#[derive(Debug, Clone, PartialEq)]
pub enum AdversaryMode {
    /// Entry `i` says whether attempt `i` is corrupted; the last entry repeats.
    Script(Vec<bool>),
    /// Each attempt is corrupted independently with this probability.
    Random(f64),
}

/// Models an unconstrained proposer: starts from the oracle plan and, when
/// corrupting, applies the first mutation the verifier rejects.
#[derive(Debug, Clone)]
pub struct AdversarialPlanner<'g> {
    oracle: OraclePlanner<'g>,
    mode: AdversaryMode,
    rng: ChaCha8Rng,
    attempt: usize,
}

impl<'g> AdversarialPlanner<'g> {
    pub fn new(graph: &'g SkillStateGraph, mode: AdversaryMode, rng: ChaCha8Rng) -> Self {
        Self {
            oracle: OraclePlanner::new(graph),
            mode,
            rng,
            attempt: 0,
        }
    }

    fn corrupt(&self, plan: &Plan, state: &EmbodimentState, view: &TopoView) -> Plan {
        let graph = self.oracle.graph;
        let infeasible = |p: &Plan| !verify(graph, state, p, false).is_feasible();
        if let Some((_, bad)) = mutations(graph, plan)
            .into_iter()
            .find(|(_, p)| infeasible(p))
        {
            return bad;
        }
        // a view skill that cannot open the plan
        for id in view.node_ids() {
            let mut steps = vec![id.to_string()];
            steps.extend(plan.steps.iter().cloned());
            let candidate = Plan { steps };
            if infeasible(&candidate) {
                return candidate;
            }
        }
        plan.clone()
    }
}

impl Planner for AdversarialPlanner<'_> {
    fn name(&self) -> &'static str {
        "adversarial"
    }

    fn propose(&mut self, request: &PlanRequest<'_>) -> Result<Plan, Refusal> {
        let corrupt = match &self.mode {
            AdversaryMode::Script(script) => script
                .get(self.attempt)
                .or(script.last())
                .copied()
                .unwrap_or(false),
            AdversaryMode::Random(p) => self.rng.gen_bool(p.clamp(0.0, 1.0)),
        };
        self.attempt += 1;
        let plan = self.oracle.propose(request)?;
        Ok(if corrupt {
            self.corrupt(&plan, request.state, request.view)
        } else {
            plan
        })
    }
}

pub const PLAN_START: &str = "<<PLAN>>";
pub const PLAN_END: &str = "<<END>>";

pub const SYSTEM_PROMPT: &str = "You plan tasks for a mobile manipulator with two arms. \
Use only the listed skills and respect the listed transitions.";

/// Deterministic prompt text. Nodes without successors are left out of the
/// transition list, so a smaller view never yields a longer prompt.
pub fn serialize_prompt(
    task: &TaskSpec,
    view: &TopoView,
    state: &EmbodimentState,
    feedback: Option<&str>,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Instruction: {}", task.instruction);
    let goals: Vec<&str> = task.goal_skills.iter().map(SkillId::as_str).collect();
    let _ = writeln!(out, "Goal skills in order: {}", goals.join(", "));
    let _ = writeln!(out, "Current state: {state}");
    out.push_str("Skills:\n");
    for node in &view.nodes {
        let _ = writeln!(out, "- {}: {}", node.id, node.label);
    }
    out.push_str("Transitions:\n");
    for (from, successors) in &view.adjacency {
        if successors.is_empty() {
            continue;
        }
        let list: Vec<&str> = successors.iter().map(SkillId::as_str).collect();
        let _ = writeln!(out, "- {from} -> {}", list.join(", "));
    }
    if let Some(feedback) = feedback {
        let _ = writeln!(out, "Feedback on your previous plan: {feedback}");
    }
    let _ = writeln!(
        out,
        "Reply with one skill id per line between a line {PLAN_START} and a line {PLAN_END}."
    );
    out
}

pub fn parse_plan(text: &str, view: &TopoView) -> Result<Plan, ParseFailure> {
    let mut lines = text.lines().map(str::trim);
    if !lines.by_ref().any(|l| l == PLAN_START) {
        return Err(ParseFailure::MissingSentinels);
    }
    let mut steps = Vec::new();
    let mut closed = false;
    for line in lines {
        if line == PLAN_END {
            closed = true;
            break;
        }
        if line.is_empty() {
            continue;
        }
        if !view.contains(line) {
            return Err(ParseFailure::UnknownSkill(line.to_string()));
        }
        steps.push(line.to_string());
    }
    if !closed {
        return Err(ParseFailure::MissingSentinels);
    }
    if steps.is_empty() {
        return Err(ParseFailure::EmptyPlan);
    }
    Ok(Plan { steps })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalConfig {
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_in_flight: usize,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            timeout_secs: 60,
            api_key_env: "SKILLSTATE_API_KEY".into(),
            max_in_flight: 4,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimit {
    slots: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimit {
    pub fn new(limit: usize) -> Arc<Self> {
        Arc::new(Self {
            slots: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        })
    }

    fn acquire(self: &Arc<Self>) -> InFlightGuard {
        let mut slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        while *slots == 0 {
            slots = self.freed.wait(slots).unwrap_or_else(|e| e.into_inner());
        }
        *slots -= 1;
        InFlightGuard(Arc::clone(self))
    }
}

struct InFlightGuard(Arc<InFlightLimit>);

impl Drop for InFlightGuard {
    fn drop(&mut self) {
        let mut slots = self.0.slots.lock().unwrap_or_else(|e| e.into_inner());
        *slots += 1;
        self.0.freed.notify_one();
    }
}

/// Chat-completion client: one request per attempt, one retry on transport
/// errors, temperature 0.
pub struct ExternalPlanner {
    config: ExternalConfig,
    agent: ureq::Agent,
    limit: Arc<InFlightLimit>,
}

impl ExternalPlanner {
    pub fn new(config: ExternalConfig, limit: Arc<InFlightLimit>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .build()
            .into();
        Self {
            config,
            agent,
            limit,
        }
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": prompt},
            ],
            "temperature": 0,
        })
    }

    fn send(&self, body: &Value) -> Result<Value, Refusal> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let token = std::env::var(&self.config.api_key_env).ok();
        let mut last = Refusal::Transport("no request made".into());
        for _ in 0..2 {
            let mut request = self.agent.post(&url);
            if let Some(token) = &token {
                request = request.header("Authorization", &format!("Bearer {token}"));
            }
            match request.send_json(body) {
                Ok(mut response) => {
                    return response
                        .body_mut()
                        .read_json::<Value>()
                        .map_err(|e| Refusal::Transport(format!("bad response body: {e}")));
                }
                Err(ureq::Error::Timeout(_)) => return Err(Refusal::Timeout),
                Err(ureq::Error::StatusCode(code)) => {
                    return Err(Refusal::Transport(format!("endpoint answered HTTP {code}")))
                }
                Err(e) => last = Refusal::Transport(e.to_string()),
            }
        }
        Err(last)
    }
}

impl Planner for ExternalPlanner {
    fn name(&self) -> &'static str {
        "external"
    }

    fn propose(&mut self, request: &PlanRequest<'_>) -> Result<Plan, Refusal> {
        let prompt = serialize_prompt(request.task, request.view, request.state, request.feedback);
        let body = self.request_body(&prompt);
        let reply = {
            let _slot = self.limit.acquire();
            self.send(&body)?
        };
        let content = reply["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| {
                Refusal::Transport("response has no choices[0].message.content".into())
            })?;
        parse_plan(content, request.view).map_err(Refusal::Unparseable)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub max_retries: usize,
    pub prune_depth: Option<PruneDepth>,
    pub check_adjacency: bool,
    /// Wall-clock budget for a single proposal.
    pub propose_timeout: Option<Duration>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_retries: 2,
            prune_depth: None,
            check_adjacency: false,
            propose_timeout: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<Plan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<VerificationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<ParseFailure>,
    /// Goals the candidate completes in order; a feasible plan short of all
    /// goals is rejected too.
    pub goals_completed: usize,
    pub accepted: bool,
    pub prompt_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub plan: Plan,
    pub attempts: usize,
    pub transcript: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    RetriesExhausted,
    NoPlan,
    SearchBudgetExceeded,
    Timeout,
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("planning failed after {} attempt(s): {reason:?}", transcript.len())]
pub struct PlanningFailed {
    pub reason: FailureReason,
    pub transcript: Vec<Attempt>,
}

pub fn plan_view(
    graph: &SkillStateGraph,
    state: &EmbodimentState,
    prune_depth: Option<PruneDepth>,
) -> TopoView {
    match prune_depth {
        Some(depth) => prune_view(graph, state, depth),
        None => topo_view(graph),
    }
}

fn missing_goals_feedback(goals: &[SkillId], done: usize) -> String {
    let rest: Vec<&str> = goals[done..].iter().map(SkillId::as_str).collect();
    format!(
        "The plan is executable but does not complete the goal skills in order; still missing: {}.",
        rest.join(", ")
    )
}

/// Proposes, verifies and feeds rejections back until a candidate is
/// feasible and completes the goals, or `1 + max_retries` attempts fail.
pub fn plan_with_verification(
    planner: &mut dyn Planner,
    graph: &SkillStateGraph,
    task: &TaskSpec,
    config: &LoopConfig,
) -> Result<PlanOutcome, PlanningFailed> {
    let state = &task.initial;
    let view = plan_view(graph, state, config.prune_depth);
    let mut transcript: Vec<Attempt> = Vec::new();
    let mut feedback: Option<String> = None;
    let fail = |reason, transcript| Err(PlanningFailed { reason, transcript });
    for _ in 0..=config.max_retries {
        let prompt_bytes = serialize_prompt(task, &view, state, feedback.as_deref()).len();
        let request = PlanRequest {
            task,
            view: &view,
            state,
            feedback: feedback.as_deref(),
        };
        let started = Instant::now();
        let proposal = planner.propose(&request);
        if config
            .propose_timeout
            .is_some_and(|limit| started.elapsed() > limit)
        {
            return fail(FailureReason::Timeout, transcript);
        }
        let candidate = match proposal {
            Ok(plan) => plan,
            Err(Refusal::Unparseable(error)) => {
                let valid: Vec<&str> = view.node_ids().map(SkillId::as_str).collect();
                feedback = Some(format!(
                    "Your reply could not be used ({error}). Valid skills are: {}.",
                    valid.join(", ")
                ));
                transcript.push(Attempt {
                    candidate: None,
                    report: None,
                    parse_error: Some(error),
                    goals_completed: 0,
                    accepted: false,
                    prompt_bytes,
                });
                continue;
            }
            Err(Refusal::NoPlan) => return fail(FailureReason::NoPlan, transcript),
            Err(Refusal::SearchBudgetExceeded) => {
                return fail(FailureReason::SearchBudgetExceeded, transcript)
            }
            Err(Refusal::Timeout) => return fail(FailureReason::Timeout, transcript),
            Err(Refusal::Transport(msg)) => return fail(FailureReason::Transport(msg), transcript),
        };
        let report = verify(graph, state, &candidate, config.check_adjacency);
        let goals_completed = if report.is_feasible() {
            goal_progress(&candidate.steps, &task.goal_skills)
        } else {
            0
        };
        let accepted = report.is_feasible() && goals_completed == task.goal_skills.len();
        feedback = if accepted {
            None
        } else if report.is_feasible() {
            Some(missing_goals_feedback(&task.goal_skills, goals_completed))
        } else {
            conflict_feedback(&report, graph, &view).ok()
        };
        transcript.push(Attempt {
            candidate: Some(candidate.clone()),
            report: Some(report),
            parse_error: None,
            goals_completed,
            accepted,
            prompt_bytes,
        });
        if accepted {
            return Ok(PlanOutcome {
                plan: candidate,
                attempts: transcript.len(),
                transcript,
            });
        }
    }
    fail(FailureReason::RetriesExhausted, transcript)
}
