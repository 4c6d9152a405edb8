//! Stochastic execution: world simulation with failure injection, outcome
//! monitoring, graph-constrained replanning and terminal classification.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{PruneDepth, SemanticSkill, SkillCategory, SkillStateGraph};
use crate::ids::{LocationId, ObjectId, SkillId};
use crate::planner::{
    goal_progress, plan_with_verification, search_from, FailureReason, LoopConfig, Planner,
    SearchError, SearchOptions, TaskSpec, DEFAULT_NODE_CAP,
};
use crate::state::{EmbodimentState, GripperContent, LocationPattern, Side};
use crate::verify::{verify, Plan};

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of stream `index` under `seed`.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}

/// The planner and execution streams of the episode seeded with `seed`.
pub fn episode_streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    (
        ChaCha8Rng::seed_from_u64(mix_seed(seed, 1)),
        ChaCha8Rng::seed_from_u64(mix_seed(seed, 2)),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectPlace {
    At(LocationId),
    InGripper(Side),
    Lost,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorldError {
    #[error("{0} is held by both grippers")]
    HeldTwice(ObjectId),
    #[error("{side:?} gripper and the position of {object} disagree")]
    GripperMismatch { object: ObjectId, side: Side },
    #[error("{0} is not an object of the graph")]
    UnknownObject(ObjectId),
    #[error("{0} is not a location of the graph")]
    UnknownLocation(LocationId),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldState {
    pub ego: EmbodimentState,
    pub object_at: BTreeMap<ObjectId, ObjectPlace>,
}

impl WorldState {
    /// Builds the world for `ego`. Held objects sit in their gripper; others
    /// go where `placement` says, else where the first skill picking them
    /// (in id order) expects them, else at the robot's location.
    pub fn new(
        graph: &SkillStateGraph,
        ego: EmbodimentState,
        placement: &BTreeMap<ObjectId, LocationId>,
    ) -> Result<Self, WorldError> {
        for (object, location) in placement {
            if !graph.objects().contains(object) {
                return Err(WorldError::UnknownObject(object.clone()));
            }
            if !graph.locations().contains(location) {
                return Err(WorldError::UnknownLocation(location.clone()));
            }
        }
        let mut object_at = BTreeMap::new();
        for object in graph.objects() {
            let place = match held_side(&ego, object) {
                Some(side) => ObjectPlace::InGripper(side),
                None => ObjectPlace::At(
                    placement
                        .get(object)
                        .cloned()
                        .or_else(|| pick_location(graph, object))
                        .unwrap_or_else(|| ego.location.clone()),
                ),
            };
            object_at.insert(object.clone(), place);
        }
        if let (Some(left), Some(right)) = (ego.left.held(), ego.right.held()) {
            if left == right {
                return Err(WorldError::HeldTwice(left.clone()));
            }
        }
        let world = WorldState { ego, object_at };
        world.check()?;
        Ok(world)
    }

    /// The gripper/object consistency invariant.
    pub fn check(&self) -> Result<(), WorldError> {
        for side in Side::BOTH {
            if let GripperContent::Holding(object) = self.ego.gripper(side) {
                match self.object_at.get(object) {
                    Some(ObjectPlace::InGripper(s)) if *s == side => {}
                    None => return Err(WorldError::UnknownObject(object.clone())),
                    _ => {
                        return Err(WorldError::GripperMismatch {
                            object: object.clone(),
                            side,
                        })
                    }
                }
            }
        }
        for (object, place) in &self.object_at {
            if let ObjectPlace::InGripper(side) = place {
                if self.ego.gripper(*side).held() != Some(object) {
                    return Err(WorldError::GripperMismatch {
                        object: object.clone(),
                        side: *side,
                    });
                }
            }
        }
        Ok(())
    }
}

fn held_side(ego: &EmbodimentState, object: &ObjectId) -> Option<Side> {
    Side::BOTH
        .into_iter()
        .find(|s| ego.gripper(*s).held() == Some(object))
}

fn pick_location(graph: &SkillStateGraph, object: &ObjectId) -> Option<LocationId> {
    graph.skills().values().find_map(|skill| {
        let picks = skill.delta.adds().any(|(_, o)| o == object);
        match (&skill.pre.location, picks) {
            (LocationPattern::At(location), true) => Some(location.clone()),
            _ => None,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    DropInPlace,
    DropLost,
    NavShortfall,
    Stall,
}

/// Conditional weights of the deviation causes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CauseWeights {
    #[serde(default)]
    pub drop_in_place: f64,
    #[serde(default)]
    pub drop_lost: f64,
    #[serde(default)]
    pub nav_shortfall: f64,
    #[serde(default)]
    pub stall: f64,
}

impl CauseWeights {
    pub fn only(cause: Cause) -> Self {
        let mut w = CauseWeights {
            drop_in_place: 0.0,
            drop_lost: 0.0,
            nav_shortfall: 0.0,
            stall: 0.0,
        };
        *w.weight_mut(cause) = 1.0;
        w
    }

    pub fn weight(&self, cause: Cause) -> f64 {
        match cause {
            Cause::DropInPlace => self.drop_in_place,
            Cause::DropLost => self.drop_lost,
            Cause::NavShortfall => self.nav_shortfall,
            Cause::Stall => self.stall,
        }
    }

    fn weight_mut(&mut self, cause: Cause) -> &mut f64 {
        match cause {
            Cause::DropInPlace => &mut self.drop_in_place,
            Cause::DropLost => &mut self.drop_lost,
            Cause::NavShortfall => &mut self.nav_shortfall,
            Cause::Stall => &mut self.stall,
        }
    }
}

impl Default for CauseWeights {
    fn default() -> Self {
        CauseWeights {
            drop_in_place: 0.25,
            drop_lost: 0.25,
            nav_shortfall: 0.25,
            stall: 0.25,
        }
    }
}

const CAUSES: [Cause; 4] = [
    Cause::DropInPlace,
    Cause::DropLost,
    Cause::NavShortfall,
    Cause::Stall,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailureModel {
    pub p_ok: f64,
    pub per_category: BTreeMap<SkillCategory, f64>,
    pub per_skill: BTreeMap<SkillId, f64>,
    pub weights: CauseWeights,
    /// Probability that the semantic check misses a discrepancy.
    pub semantic_false_negative: f64,
    pub rng_seed: u64,
}

impl Default for FailureModel {
    fn default() -> Self {
        Self {
            p_ok: 1.0,
            per_category: BTreeMap::new(),
            per_skill: BTreeMap::new(),
            weights: CauseWeights::default(),
            semantic_false_negative: 0.0,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("{name} = {value} is not a probability")]
    NotProbability { name: String, value: f64 },
    #[error("cause weights sum to {0}, expected 1")]
    WeightSum(f64),
}

impl FailureModel {
    pub fn uniform(p_ok: f64, weights: CauseWeights) -> Self {
        Self {
            p_ok,
            weights,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let check = |name: String, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(ModelError::NotProbability { name, value })
            }
        };
        check("p_ok".into(), self.p_ok)?;
        for (category, p) in &self.per_category {
            check(format!("per_category.{category}"), *p)?;
        }
        for (skill, p) in &self.per_skill {
            check(format!("per_skill.{skill}"), *p)?;
        }
        check(
            "semantic_false_negative".into(),
            self.semantic_false_negative,
        )?;
        for cause in CAUSES {
            check(format!("weights.{cause:?}"), self.weights.weight(cause))?;
        }
        let sum: f64 = CAUSES.iter().map(|c| self.weights.weight(*c)).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ModelError::WeightSum(sum));
        }
        Ok(())
    }

    /// Skill override, then category override, then the default.
    pub fn p_ok_for(&self, skill: &SemanticSkill) -> f64 {
        self.per_skill
            .get(&skill.id)
            .or_else(|| self.per_category.get(&skill.category))
            .copied()
            .unwrap_or(self.p_ok)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Deviation {
        observed: EmbodimentState,
        cause: Cause,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{skill} executed at {state}, which its precondition rejects")]
pub struct PreconditionViolated {
    pub skill: SkillId,
    pub state: EmbodimentState,
}

fn carrying(world: &WorldState) -> Option<(Side, ObjectId)> {
    Side::BOTH
        .into_iter()
        .find_map(|s| world.ego.gripper(s).held().map(|o| (s, o.clone())))
}

fn applicable(cause: Cause, skill: &SemanticSkill, world: &WorldState) -> bool {
    let picks = skill.delta.adds().next().is_some();
    let places = skill.delta.subs().next().is_some();
    let carrying_move = skill.delta.is_move() && carrying(world).is_some();
    match cause {
        Cause::DropInPlace => picks || carrying_move,
        Cause::DropLost => picks || carrying_move || places,
        Cause::NavShortfall => skill.delta.is_move(),
        Cause::Stall => true,
    }
}

fn sample_cause(
    draw: f64,
    skill: &SemanticSkill,
    world: &WorldState,
    weights: &CauseWeights,
) -> Cause {
    let live: Vec<(Cause, f64)> = CAUSES
        .iter()
        .filter(|c| applicable(**c, skill, world))
        .map(|c| (*c, weights.weight(*c)))
        .filter(|(_, w)| *w > 0.0)
        .collect();
    let total: f64 = live.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return Cause::Stall;
    }
    let mut acc = 0.0;
    for (cause, w) in &live {
        acc += w / total;
        if draw < acc {
            return *cause;
        }
    }
    live.last().map(|(c, _)| *c).unwrap_or(Cause::Stall)
}

fn deviate(world: &mut WorldState, skill: &SemanticSkill, cause: Cause) {
    let dropped_to = |world: &mut WorldState, side: Side, object: &ObjectId, place: ObjectPlace| {
        *world.ego.gripper_mut(side) = GripperContent::Empty;
        world.object_at.insert(object.clone(), place);
    };
    match cause {
        Cause::Stall | Cause::NavShortfall => {}
        Cause::DropInPlace | Cause::DropLost => {
            if let Some((_, object)) = skill.delta.adds().next() {
                // never grasped: stays put, or slips out of reach
                if cause == Cause::DropLost {
                    world.object_at.insert(object.clone(), ObjectPlace::Lost);
                }
            } else if let Some((side, object)) = skill.delta.subs().next() {
                let object = object.clone();
                dropped_to(world, side, &object, ObjectPlace::Lost);
            } else if let Some((side, object)) = carrying(world) {
                let place = if cause == Cause::DropLost {
                    ObjectPlace::Lost
                } else {
                    ObjectPlace::At(world.ego.location.clone())
                };
                dropped_to(world, side, &object, place);
            }
        }
    }
}

/// Executes one skill against the world. Every call draws exactly two
/// numbers from `rng`, so streams stay aligned across policies.
///
/// A pick of an object that is lost or already held grasps nothing and
/// reports a stall.
pub fn execute_skill(
    world: &mut WorldState,
    skill: &SemanticSkill,
    model: &FailureModel,
    rng: &mut ChaCha8Rng,
) -> Result<Outcome, PreconditionViolated> {
    let expected = skill
        .successor(&world.ego)
        .ok_or_else(|| PreconditionViolated {
            skill: skill.id.clone(),
            state: world.ego.clone(),
        })?;
    let ok_draw: f64 = rng.gen();
    let cause_draw: f64 = rng.gen();
    let graspable = skill
        .delta
        .adds()
        .all(|(_, o)| matches!(world.object_at.get(o), Some(ObjectPlace::At(_))));
    let cause = if !graspable {
        Cause::Stall
    } else if ok_draw < model.p_ok_for(skill) {
        for (side, object) in skill.delta.adds() {
            world
                .object_at
                .insert(object.clone(), ObjectPlace::InGripper(side));
        }
        for (_, object) in skill.delta.subs() {
            world
                .object_at
                .insert(object.clone(), ObjectPlace::At(expected.location.clone()));
        }
        world.ego = expected;
        return Ok(Outcome::Success);
    } else {
        sample_cause(cause_draw, skill, world, &model.weights)
    };
    deviate(world, skill, cause);
    Ok(Outcome::Deviation {
        observed: world.ego.clone(),
        cause,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorLayer {
    Ego,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorResult {
    Ok,
    Deviation {
        observed: EmbodimentState,
        layer: MonitorLayer,
    },
}

/// Ego check against `expected`, then optionally the objects `skill` should
/// have moved: picked ones in the gripper, placed ones at the location.
pub fn monitor(
    expected: &EmbodimentState,
    world: &WorldState,
    skill: &SemanticSkill,
    semantic_check: bool,
) -> MonitorResult {
    let deviation = |layer| MonitorResult::Deviation {
        observed: world.ego.clone(),
        layer,
    };
    if &world.ego != expected {
        return deviation(MonitorLayer::Ego);
    }
    if semantic_check {
        for (side, object) in skill.delta.adds() {
            if world.object_at.get(object) != Some(&ObjectPlace::InGripper(side)) {
                return deviation(MonitorLayer::Semantic);
            }
        }
        for (_, object) in skill.delta.subs() {
            if world.object_at.get(object) != Some(&ObjectPlace::At(expected.location.clone())) {
                return deviation(MonitorLayer::Semantic);
            }
        }
    }
    MonitorResult::Ok
}

/// Skills usable for recovery given what the world shows: picks of lost or
/// already held objects are masked out.
pub fn replan_mask(graph: &SkillStateGraph, world: &WorldState) -> BTreeSet<SkillId> {
    graph
        .skills()
        .values()
        .filter(|skill| {
            skill
                .delta
                .adds()
                .all(|(_, object)| matches!(world.object_at.get(object), Some(ObjectPlace::At(_))))
        })
        .map(|skill| skill.id.clone())
        .collect()
}

pub fn replan(
    graph: &SkillStateGraph,
    observed: &EmbodimentState,
    world_hint: &WorldState,
    remaining_goals: &[SkillId],
) -> Result<Plan, SearchError> {
    let allowed = replan_mask(graph, world_hint);
    let options = SearchOptions {
        allowed: Some(&allowed),
        node_cap: DEFAULT_NODE_CAP,
    };
    search_from(graph, observed, remaining_goals, &options)
}

/// New remainder after a deviation: the shortest prefix of `corrective`
/// that makes `suffix` executable again and still completes the goals, else
/// `corrective` itself.
pub fn splice(
    graph: &SkillStateGraph,
    observed: &EmbodimentState,
    corrective: &Plan,
    suffix: &[SkillId],
    remaining_goals: &[SkillId],
    allowed: &BTreeSet<SkillId>,
) -> Plan {
    let suffix_allowed = suffix.iter().all(|id| allowed.contains(id));
    if suffix_allowed {
        for k in 0..=corrective.len() {
            let mut steps = corrective.steps[..k].to_vec();
            steps.extend(suffix.iter().map(|id| id.to_string()));
            let candidate = Plan { steps };
            if verify(graph, observed, &candidate, false).is_feasible()
                && goal_progress(&candidate.steps, remaining_goals) == remaining_goals.len()
            {
                return candidate;
            }
        }
    }
    corrective.clone()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Policy {
    pub closed_loop: bool,
    pub max_retries: usize,
    pub prune_depth: Option<PruneDepth>,
    /// `None` is unbounded.
    pub step_limit: Option<usize>,
    pub semantic_check: bool,
    /// Route recovery through the planner instead of the graph search.
    pub replan_via_planner: bool,
}

impl Default for Policy {
    fn default() -> Self {
        Self {
            closed_loop: true,
            max_retries: 2,
            prune_depth: None,
            step_limit: Some(100),
            semantic_check: false,
            replan_via_planner: false,
        }
    }
}

impl Policy {
    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            max_retries: self.max_retries,
            prune_depth: self.prune_depth,
            ..LoopConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replan {
    pub trigger_state: EmbodimentState,
    pub corrective_plan: Plan,
    /// Remainder executed after the splice.
    pub spliced: Plan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    /// 1-based.
    pub step: usize,
    pub skill: SkillId,
    pub outcome: Outcome,
    pub monitor: MonitorResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_completed: Option<SkillId>,
    pub world: WorldState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replan: Option<Replan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalMode {
    UnrecoverableState,
    StepLimitExceeded,
    RegressionDetected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Success,
    Failure {
        mode: TerminalMode,
        at_step: usize,
        #[serde(default)]
        during_planning: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanningRecord {
    pub attempts: usize,
    pub accepted: bool,
    /// Candidates the verifier found feasible.
    pub valid_candidates: usize,
    pub prompt_bytes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Plan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureReason>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub task: TaskSpec,
    pub planning: PlanningRecord,
    pub initial_world: WorldState,
    pub events: Vec<Event>,
    pub goals_completed: Vec<SkillId>,
    pub terminal: Terminal,
}

impl EpisodeTrace {
    pub fn is_success(&self) -> bool {
        self.terminal == Terminal::Success
    }

    pub fn planning_failed(&self) -> bool {
        matches!(
            self.terminal,
            Terminal::Failure {
                during_planning: true,
                ..
            }
        )
    }

    pub fn replans(&self) -> usize {
        self.events.iter().filter(|e| e.replan.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    PreconditionViolated(#[from] PreconditionViolated),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("recovery search expanded more than {0} nodes")]
    SearchBudgetExceeded(usize),
}

/// Watches completed place goals: once an object is put down for a goal it
/// must stay there unless a later step picks it up.
#[derive(Debug, Default)]
struct RegressionScan {
    placed: Vec<(ObjectId, LocationId)>,
}

impl RegressionScan {
    fn observe(&mut self, graph: &SkillStateGraph, event: &Event) -> bool {
        let skill = graph.skill(event.skill.as_str());
        let picked: Vec<&ObjectId> = skill
            .map(|s| s.delta.adds().map(|(_, o)| o).collect())
            .unwrap_or_default();
        self.placed.retain(|(object, _)| !picked.contains(&object));
        let regressed = self.placed.iter().any(|(object, location)| {
            event.world.object_at.get(object) != Some(&ObjectPlace::At(location.clone()))
        });
        if event.goal_completed.is_some() {
            if let Some(skill) = skill {
                for (_, object) in skill.delta.subs() {
                    if let Some(ObjectPlace::At(location)) = event.world.object_at.get(object) {
                        self.placed.push((object.clone(), location.clone()));
                    }
                }
            }
        }
        regressed
    }
}

/// Plans, then executes and monitors step by step, recovering from
/// deviations when `policy.closed_loop` is set.
pub fn run_episode(
    graph: &SkillStateGraph,
    task: &TaskSpec,
    world: WorldState,
    planner: &mut dyn Planner,
    model: &FailureModel,
    policy: &Policy,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeTrace, SimError> {
    world.check()?;
    let initial_world = world.clone();
    let mut trace = EpisodeTrace {
        task: task.clone(),
        planning: PlanningRecord {
            attempts: 0,
            accepted: false,
            valid_candidates: 0,
            prompt_bytes: Vec::new(),
            plan: None,
            failure: None,
        },
        initial_world,
        events: Vec::new(),
        goals_completed: Vec::new(),
        terminal: Terminal::Success,
    };
    let planned = plan_with_verification(planner, graph, task, &policy.loop_config());
    let transcript = match &planned {
        Ok(outcome) => &outcome.transcript,
        Err(failed) => &failed.transcript,
    };
    trace.planning.attempts = transcript.len();
    trace.planning.valid_candidates = transcript
        .iter()
        .filter(|a| a.report.as_ref().is_some_and(|r| r.is_feasible()))
        .count();
    trace.planning.prompt_bytes = transcript.iter().map(|a| a.prompt_bytes).collect();
    let plan = match planned {
        Ok(outcome) => outcome.plan,
        Err(failed) => {
            trace.planning.failure = Some(failed.reason);
            trace.terminal = Terminal::Failure {
                mode: TerminalMode::UnrecoverableState,
                at_step: 0,
                during_planning: true,
            };
            return Ok(trace);
        }
    };
    trace.planning.accepted = true;
    trace.planning.plan = Some(plan.clone());

    let goals = &task.goal_skills;
    let mut world = world;
    let mut queue: VecDeque<SkillId> = plan
        .steps
        .iter()
        .map(|s| graph.skill(s).expect("verified plan").id.clone())
        .collect();
    let mut scan = RegressionScan::default();
    let mut steps = 0usize;
    let fail = |mode, at_step| Terminal::Failure {
        mode,
        at_step,
        during_planning: false,
    };
    trace.terminal = loop {
        if trace.goals_completed.len() == goals.len() {
            break Terminal::Success;
        }
        if policy.step_limit.is_some_and(|limit| steps >= limit) {
            break fail(TerminalMode::StepLimitExceeded, steps);
        }
        let Some(id) = queue.pop_front() else {
            break fail(TerminalMode::UnrecoverableState, steps);
        };
        let skill = graph.skill(id.as_str()).expect("plans hold graph skills");
        let expected = skill
            .successor(&world.ego)
            .ok_or_else(|| PreconditionViolated {
                skill: id.clone(),
                state: world.ego.clone(),
            })?;
        let outcome = execute_skill(&mut world, skill, model, rng)?;
        world.check()?;
        steps += 1;
        let mut verdict = monitor(&expected, &world, skill, policy.semantic_check);
        if policy.semantic_check {
            let miss: f64 = rng.gen();
            if matches!(
                verdict,
                MonitorResult::Deviation {
                    layer: MonitorLayer::Semantic,
                    ..
                }
            ) && miss < model.semantic_false_negative
            {
                verdict = MonitorResult::Ok;
            }
        }
        let done = trace.goals_completed.len();
        let goal_completed =
            (verdict == MonitorResult::Ok && goals[done] == id).then(|| id.clone());
        if let Some(goal) = &goal_completed {
            trace.goals_completed.push(goal.clone());
        }
        let mut event = Event {
            step: steps,
            skill: id.clone(),
            outcome,
            monitor: verdict.clone(),
            goal_completed,
            world: world.clone(),
            replan: None,
        };
        if scan.observe(graph, &event) {
            trace.events.push(event);
            break fail(TerminalMode::RegressionDetected, steps);
        }
        let MonitorResult::Deviation { observed, .. } = verdict else {
            trace.events.push(event);
            continue;
        };
        if !policy.closed_loop {
            trace.events.push(event);
            break fail(TerminalMode::UnrecoverableState, steps);
        }
        let remaining = &goals[trace.goals_completed.len()..];
        let allowed = replan_mask(graph, &world);
        let corrective = if policy.replan_via_planner {
            let subtask = TaskSpec {
                goal_skills: remaining.to_vec(),
                instruction: task.instruction.clone(),
                initial: observed.clone(),
            };
            plan_with_verification(planner, graph, &subtask, &policy.loop_config())
                .ok()
                .map(|o| o.plan)
                .filter(|p| p.steps.iter().all(|s| allowed.contains(s.as_str())))
        } else {
            match replan(graph, &observed, &world, remaining) {
                Ok(plan) => Some(plan),
                Err(SearchError::NoPlan) => None,
                Err(SearchError::SearchBudgetExceeded { cap }) => {
                    return Err(SimError::SearchBudgetExceeded(cap))
                }
            }
        };
        let Some(corrective) = corrective else {
            trace.events.push(event);
            break fail(TerminalMode::UnrecoverableState, steps);
        };
        let mut suffix = vec![id.clone()];
        suffix.extend(queue.iter().cloned());
        let spliced = splice(graph, &observed, &corrective, &suffix, remaining, &allowed);
        queue = spliced
            .steps
            .iter()
            .map(|s| graph.skill(s).expect("verified plan").id.clone())
            .collect();
        event.replan = Some(Replan {
            trigger_state: observed,
            corrective_plan: corrective,
            spliced,
        });
        trace.events.push(event);
    };
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureClass {
    /// Unrecoverable physical state.
    Fle,
    /// Step budget exhausted.
    Tle,
    /// A completed sub-task was undone.
    Ptf,
}

/// Maps the terminal to its failure class. A regression found by rescanning
/// the events counts as PTF whatever the recorded terminal.
pub fn classify(graph: &SkillStateGraph, trace: &EpisodeTrace) -> Option<FailureClass> {
    let mut scan = RegressionScan::default();
    if trace.events.iter().any(|e| scan.observe(graph, e)) {
        return Some(FailureClass::Ptf);
    }
    match trace.terminal {
        Terminal::Success => None,
        Terminal::Failure { mode, .. } => Some(match mode {
            TerminalMode::UnrecoverableState => FailureClass::Fle,
            TerminalMode::StepLimitExceeded => FailureClass::Tle,
            TerminalMode::RegressionDetected => FailureClass::Ptf,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{mini, sid};
    use crate::planner::OraclePlanner;
    fn st(s: &str) -> EmbodimentState {
        s.parse().unwrap()
    }

    fn world(g: &SkillStateGraph, ego: &str) -> WorldState {
        WorldState::new(g, st(ego), &BTreeMap::new()).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn task(goals: &[&str], initial: &str) -> TaskSpec {
        TaskSpec {
            goal_skills: goals.iter().map(|g| sid(g)).collect(),
            instruction: String::new(),
            initial: st(initial),
        }
    }

    #[test]
    fn default_placement() {
        let g = mini();
        let w = world(&g, "(table, cup, null)");
        assert_eq!(
            w.object_at[&ObjectId::new("bowl").unwrap()],
            ObjectPlace::At(LocationId::new("pantry").unwrap())
        );
        assert_eq!(
            w.object_at[&ObjectId::new("cup").unwrap()],
            ObjectPlace::InGripper(Side::Left)
        );
        let mut broken = w.clone();
        broken.ego.left = GripperContent::Empty;
        assert!(broken.check().is_err());
    }

    #[test]
    fn deterministic_pick() {
        let g = mini();
        let mut w = world(&g, "(pantry, null, null)");
        let skill = g.skill("pick_bowl_pantry").unwrap();
        let outcome = execute_skill(&mut w, skill, &FailureModel::default(), &mut rng(1)).unwrap();
        assert_eq!(outcome, Outcome::Success);
        assert_eq!(w.ego, st("(pantry, bowl, null)"));
        assert_eq!(
            w.object_at[&ObjectId::new("bowl").unwrap()],
            ObjectPlace::InGripper(Side::Left)
        );
    }

    #[test]
    fn forced_drop_in_place() {
        let g = mini();
        let mut w = world(&g, "(pantry, null, null)");
        let model = FailureModel::uniform(0.0, CauseWeights::only(Cause::DropInPlace));
        let skill = g.skill("pick_bowl_pantry").unwrap();
        let outcome = execute_skill(&mut w, skill, &model, &mut rng(1)).unwrap();
        assert_eq!(
            outcome,
            Outcome::Deviation {
                observed: st("(pantry, null, null)"),
                cause: Cause::DropInPlace
            }
        );
        assert_eq!(
            w.object_at[&ObjectId::new("bowl").unwrap()],
            ObjectPlace::At(LocationId::new("pantry").unwrap())
        );
        let expected = skill.successor(&st("(pantry, null, null)")).unwrap();
        assert!(matches!(
            monitor(&expected, &w, skill, false),
            MonitorResult::Deviation { .. }
        ));
    }

    #[test]
    fn seeded_outcomes_repeat() {
        let g = mini();
        let model = FailureModel::uniform(0.5, CauseWeights::only(Cause::Stall));
        let run = || {
            let mut r = rng(42);
            let mut w = world(&g, "(pantry, null, null)");
            let skill = g.skill("nav_pantry_to_table").unwrap();
            (0..10)
                .map(|_| {
                    let mut fresh = w.clone();
                    let o = execute_skill(&mut fresh, skill, &model, &mut r).unwrap();
                    w = world(&g, "(pantry, null, null)");
                    o
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn precondition_violation_is_error() {
        let g = mini();
        let mut w = world(&g, "(table, null, null)");
        let err = execute_skill(
            &mut w,
            g.skill("pick_bowl_pantry").unwrap(),
            &FailureModel::default(),
            &mut rng(0),
        );
        assert!(err.is_err());
    }

    #[test]
    fn stall_after_place_is_seen() {
        let g = mini();
        let mut w = world(&g, "(table, bowl, null)");
        let skill = g.skill("place_bowl_table").unwrap();
        let expected = skill.successor(&w.ego).unwrap();
        execute_skill(
            &mut w,
            skill,
            &FailureModel::uniform(0.0, CauseWeights::only(Cause::Stall)),
            &mut rng(0),
        )
        .unwrap();
        assert!(matches!(
            monitor(&expected, &w, skill, false),
            MonitorResult::Deviation { .. }
        ));
    }

    #[test]
    fn lost_place_needs_semantic_layer() {
        let g = mini();
        let mut w = world(&g, "(table, bowl, null)");
        let skill = g.skill("place_bowl_table").unwrap();
        let expected = skill.successor(&w.ego).unwrap();
        let model = FailureModel::uniform(0.0, CauseWeights::only(Cause::DropLost));
        execute_skill(&mut w, skill, &model, &mut rng(0)).unwrap();
        assert_eq!(monitor(&expected, &w, skill, false), MonitorResult::Ok);
        assert!(matches!(
            monitor(&expected, &w, skill, true),
            MonitorResult::Deviation {
                layer: MonitorLayer::Semantic,
                ..
            }
        ));
    }

    #[test]
    fn replan_examples() {
        let g = mini();
        // dropped in place while driving to the table
        let mut w = world(&g, "(pantry, bowl, null)");
        let nav = g.skill("nav_pantry_to_table").unwrap();
        execute_skill(
            &mut w,
            nav,
            &FailureModel::uniform(0.0, CauseWeights::only(Cause::DropInPlace)),
            &mut rng(0),
        )
        .unwrap();
        assert_eq!(w.ego, st("(pantry, null, null)"));
        let goals = [sid("place_bowl_table")];
        let corrective = replan(&g, &w.ego, &w, &goals).unwrap();
        let suffix = [sid("nav_pantry_to_table"), sid("place_bowl_table")];
        let spliced = splice(
            &g,
            &w.ego,
            &corrective,
            &suffix,
            &goals,
            &replan_mask(&g, &w),
        );
        assert_eq!(
            spliced,
            Plan::new([
                "pick_bowl_pantry",
                "nav_pantry_to_table",
                "place_bowl_table"
            ])
        );

        // navigation fell short
        let w = world(&g, "(pantry, bowl, null)");
        assert_eq!(
            replan(&g, &w.ego, &w, &goals).unwrap(),
            Plan::new(["nav_pantry_to_table", "place_bowl_table"])
        );

        // bowl gone for good
        let mut w = world(&g, "(pantry, null, null)");
        w.object_at
            .insert(ObjectId::new("bowl").unwrap(), ObjectPlace::Lost);
        assert_eq!(replan(&g, &w.ego, &w, &goals), Err(SearchError::NoPlan));
    }

    #[test]
    fn deterministic_episode() {
        let g = mini();
        let t = task(
            &["place_bowl_table", "place_cup_table"],
            "(pantry, null, null)",
        );
        let w = WorldState::new(&g, t.initial.clone(), &BTreeMap::new()).unwrap();
        let trace = run_episode(
            &g,
            &t,
            w,
            &mut OraclePlanner::new(&g),
            &FailureModel::default(),
            &Policy::default(),
            &mut rng(3),
        )
        .unwrap();
        assert!(trace.is_success());
        assert_eq!(
            trace.events.len(),
            trace.planning.plan.as_ref().unwrap().len()
        );
        assert_eq!(trace.replans(), 0);
        assert_eq!(classify(&g, &trace), None);
    }

    #[test]
    fn recoverable_closed_loop() {
        let g = mini();
        let t = task(
            &["place_bowl_table", "place_cup_table"],
            "(pantry, null, null)",
        );
        let model = FailureModel::uniform(0.6, CauseWeights::only(Cause::DropInPlace));
        let policy = Policy {
            step_limit: None,
            ..Policy::default()
        };
        for seed in 0..50 {
            let w = WorldState::new(&g, t.initial.clone(), &BTreeMap::new()).unwrap();
            let trace = run_episode(
                &g,
                &t,
                w,
                &mut OraclePlanner::new(&g),
                &model,
                &policy,
                &mut rng(seed),
            )
            .unwrap();
            assert!(trace.is_success(), "seed {seed}");
            for event in &trace.events {
                event.world.check().unwrap();
            }
        }
    }

    #[test]
    fn lost_object_is_fle() {
        let g = mini();
        let t = task(&["place_bowl_table"], "(pantry, null, null)");
        let model = FailureModel::uniform(0.0, CauseWeights::only(Cause::DropLost));
        let w = WorldState::new(&g, t.initial.clone(), &BTreeMap::new()).unwrap();
        let trace = run_episode(
            &g,
            &t,
            w,
            &mut OraclePlanner::new(&g),
            &model,
            &Policy::default(),
            &mut rng(0),
        )
        .unwrap();
        assert_eq!(classify(&g, &trace), Some(FailureClass::Fle));
        assert_eq!(trace.events.len(), 1);
    }

    #[test]
    fn stalls_exhaust_budget() {
        let g = mini();
        let t = task(&["place_bowl_table"], "(pantry, null, null)");
        let model = FailureModel::uniform(0.0, CauseWeights::only(Cause::Stall));
        let policy = Policy {
            step_limit: Some(5),
            ..Policy::default()
        };
        let w = WorldState::new(&g, t.initial.clone(), &BTreeMap::new()).unwrap();
        let trace = run_episode(
            &g,
            &t,
            w,
            &mut OraclePlanner::new(&g),
            &model,
            &policy,
            &mut rng(0),
        )
        .unwrap();
        assert_eq!(classify(&g, &trace), Some(FailureClass::Tle));
        assert_eq!(trace.events.len(), 5);
    }

    #[test]
    fn planning_failure_trace() {
        let g = mini();
        let t = task(&["place_bowl_table"], "(pantry, null, null)");
        let w = WorldState::new(&g, t.initial.clone(), &BTreeMap::new()).unwrap();
        let mut planner = crate::planner::ReplayPlanner::default();
        let trace = run_episode(
            &g,
            &t,
            w,
            &mut planner,
            &FailureModel::default(),
            &Policy::default(),
            &mut rng(0),
        )
        .unwrap();
        assert!(trace.events.is_empty());
        assert!(trace.planning_failed());
        assert_eq!(
            trace.terminal,
            Terminal::Failure {
                mode: TerminalMode::UnrecoverableState,
                at_step: 0,
                during_planning: true
            }
        );
    }

    #[test]
    fn seeds_mix_apart() {
        assert_ne!(mix_seed(7, 0), mix_seed(7, 1));
        assert_ne!(mix_seed(7, 0), mix_seed(8, 0));
        assert_eq!(mix_seed(7, 3), mix_seed(7, 3));
    }
}
