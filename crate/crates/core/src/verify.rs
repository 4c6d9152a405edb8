//! Feasibility verification of candidate skill sequences.
//!
//! Starting from the initial state, each step's precondition is checked
//! against the current state and its delta applied to obtain the next one.
//! Verification stops at the first conflict.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::{prune_view, PruneDepth, SkillStateGraph, TopoView};
use crate::ids::{InvalidId, SkillId};
use crate::state::{EmbodimentState, Slot};

/// An ordered sequence of skill ids.
///
/// Steps are kept as raw tokens so that hallucinated or malformed ids survive
/// until verification can report them.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Plan {
    pub steps: Vec<String>,
}

impl Plan {
    pub fn new(steps: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            steps: steps.into_iter().map(Into::into).collect(),
        }
    }

    pub fn from_ids(ids: impl IntoIterator<Item = SkillId>) -> Self {
        Self::new(ids.into_iter().map(|id| id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn prefix(&self, len: usize) -> Plan {
        Plan {
            steps: self.steps[..len].to_vec(),
        }
    }

    /// Serializes in the plan-file format: one id per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(step);
            out.push('\n');
        }
        out
    }
}

/// Plan files: one skill id per line; blank lines and `#` comments ignored.
impl FromStr for Plan {
    type Err = InvalidId;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut steps = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            SkillId::new(line)?;
            steps.push(line.to_string());
        }
        Ok(Plan { steps })
    }
}

impl fmt::Display for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.steps.join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Feasible,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictKind {
    PreconditionMismatch,
    DeltaInapplicable,
    UnknownSkill,
    NonAdjacentTransition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    /// 0-based step index.
    pub index: usize,
    pub skill: String,
    pub kind: ConflictKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<Slot>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub verdict: Verdict,
    pub state_chain: Vec<EmbodimentState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conflict: Option<Conflict>,
}

impl VerificationReport {
    pub fn is_feasible(&self) -> bool {
        self.verdict == Verdict::Feasible
    }

    pub fn final_state(&self) -> &EmbodimentState {
        self.state_chain
            .last()
            .expect("chain holds at least the initial state")
    }
}

pub fn verify(
    graph: &SkillStateGraph,
    initial: &EmbodimentState,
    plan: &Plan,
    check_adjacency: bool,
) -> VerificationReport {
    let mut chain = vec![initial.clone()];
    let mut previous: Option<&SkillId> = None;
    for (index, step) in plan.steps.iter().enumerate() {
        let current = chain.last().expect("non-empty chain");
        let infeasible =
            |kind, slot, detail: String, chain: Vec<EmbodimentState>| VerificationReport {
                verdict: Verdict::Infeasible,
                state_chain: chain,
                conflict: Some(Conflict {
                    index,
                    skill: step.clone(),
                    kind,
                    slot,
                    detail,
                }),
            };
        let Some(skill) = graph.skill(step) else {
            return infeasible(
                ConflictKind::UnknownSkill,
                None,
                format!("{step} is not a skill of this graph"),
                chain,
            );
        };
        if check_adjacency {
            if let Some(prev) = previous {
                if !graph.has_edge(prev, &skill.id) {
                    return infeasible(
                        ConflictKind::NonAdjacentTransition,
                        None,
                        format!("no edge {prev} -> {step}"),
                        chain,
                    );
                }
            }
        }
        if let Some(slot) = skill.pre.mismatch(current) {
            let detail = format!(
                "{slot} is {} but {step} requires {}",
                slot_value(current, slot),
                slot_pattern(&skill.pre, slot)
            );
            return infeasible(
                ConflictKind::PreconditionMismatch,
                Some(slot),
                detail,
                chain,
            );
        }
        match skill.delta.apply(current) {
            Ok(next) => chain.push(next),
            Err(err) => {
                let detail = format!(
                    "delta {} cannot apply: {:?} on {}",
                    skill.delta, err.kind, err.slot
                );
                return infeasible(
                    ConflictKind::DeltaInapplicable,
                    Some(err.slot),
                    detail,
                    chain,
                );
            }
        }
        previous = Some(&skill.id);
    }
    VerificationReport {
        verdict: Verdict::Feasible,
        state_chain: chain,
        conflict: None,
    }
}

fn slot_value(state: &EmbodimentState, slot: Slot) -> String {
    match slot {
        Slot::Location => state.location.to_string(),
        Slot::Left => state.left.to_string(),
        Slot::Right => state.right.to_string(),
    }
}

fn slot_pattern(pre: &crate::state::Precondition, slot: Slot) -> String {
    match slot {
        Slot::Location => pre.location.to_string(),
        Slot::Left => pre.left.to_string(),
        Slot::Right => pre.right.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FeedbackError {
    #[error("conflict feedback requested for a feasible plan")]
    NotInfeasible,
}

/// Renders a rejection as one paragraph for the planner's next attempt.
///
/// Names the failing step (1-based), the skill, the violated slot, the state
/// at that point, and the skills of `view` that are executable there.
pub fn conflict_feedback(
    report: &VerificationReport,
    graph: &SkillStateGraph,
    view: &TopoView,
) -> Result<String, FeedbackError> {
    let conflict = match (&report.verdict, &report.conflict) {
        (Verdict::Infeasible, Some(conflict)) => conflict,
        _ => return Err(FeedbackError::NotInfeasible),
    };
    let state = report.final_state();
    let mut text = format!(
        "The plan was rejected at step {} ({}): ",
        conflict.index + 1,
        conflict.skill
    );
    match conflict.kind {
        ConflictKind::UnknownSkill => {
            let valid: Vec<&str> = view.node_ids().map(SkillId::as_str).collect();
            let _ = write!(
                text,
                "{} is not a known skill. Valid skills are: {}.",
                conflict.skill,
                valid.join(", ")
            );
            return Ok(text);
        }
        ConflictKind::NonAdjacentTransition => {
            let _ = write!(
                text,
                "this transition is not allowed by the skill graph ({}).",
                conflict.detail
            );
        }
        ConflictKind::PreconditionMismatch | ConflictKind::DeltaInapplicable => {
            let slot = conflict.slot.map(Slot::describe).unwrap_or("state");
            let _ = write!(text, "the {slot} does not allow it ({}).", conflict.detail);
        }
    }
    let executable = prune_view(graph, state, PruneDepth::steps(1).expect("1 > 0"));
    let options: Vec<&str> = executable
        .node_ids()
        .filter(|id| view.contains(id.as_str()))
        .map(SkillId::as_str)
        .collect();
    let _ = write!(
        text,
        " The robot state at that point is {state}. Skills executable from this state: {}.",
        if options.is_empty() {
            "none".to_string()
        } else {
            options.join(", ")
        }
    );
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::mini;
    use crate::graph::topo_view;

    fn st(s: &str) -> EmbodimentState {
        s.parse().unwrap()
    }

    #[test]
    fn feasible_three_step() {
        let g = mini();
        let plan = Plan::new([
            "pick_bowl_pantry",
            "nav_pantry_to_table",
            "place_bowl_table",
        ]);
        let report = verify(&g, &st("(pantry, null, null)"), &plan, false);
        assert_eq!(report.verdict, Verdict::Feasible);
        assert_eq!(report.state_chain.len(), 4);
        assert_eq!(report.final_state(), &st("(table, null, null)"));
        assert!(verify(&g, &st("(pantry, null, null)"), &plan, true).is_feasible());
    }

    #[test]
    fn double_pick_rejected() {
        let g = mini();
        let plan = Plan::new(["pick_bowl_pantry", "pick_cup_pantry"]);
        let report = verify(&g, &st("(pantry, null, null)"), &plan, false);
        assert_eq!(report.verdict, Verdict::Infeasible);
        let conflict = report.conflict.as_ref().unwrap();
        assert_eq!(conflict.index, 1);
        assert_eq!(conflict.kind, ConflictKind::PreconditionMismatch);
        assert_eq!(conflict.slot, Some(Slot::Left));
        assert_eq!(report.state_chain.len(), 2);

        let feedback = conflict_feedback(&report, &g, &topo_view(&g)).unwrap();
        assert!(feedback.contains("step 2"), "{feedback}");
        assert!(feedback.contains("left gripper"), "{feedback}");
        assert!(feedback.contains("nav_pantry_to_table"), "{feedback}");
        assert_eq!(
            feedback,
            conflict_feedback(&report, &g, &topo_view(&g)).unwrap()
        );
    }

    #[test]
    fn empty_plan_is_feasible() {
        let g = mini();
        let report = verify(&g, &st("(table, cup, null)"), &Plan::default(), true);
        assert!(report.is_feasible());
        assert_eq!(report.state_chain, vec![st("(table, cup, null)")]);
        assert_eq!(
            conflict_feedback(&report, &g, &topo_view(&g)),
            Err(FeedbackError::NotInfeasible)
        );
    }

    #[test]
    fn unknown_skill_lists_valid_ids() {
        let g = mini();
        let report = verify(
            &g,
            &st("(pantry, null, null)"),
            &Plan::new(["teleport"]),
            false,
        );
        assert_eq!(
            report.conflict.as_ref().unwrap().kind,
            ConflictKind::UnknownSkill
        );
        let feedback = conflict_feedback(&report, &g, &topo_view(&g)).unwrap();
        for id in g.skills().keys() {
            assert!(feedback.contains(id.as_str()));
        }
    }

    #[test]
    fn adjacency_checked_only_when_asked() {
        let g = mini();
        // feasible state-wise, but nav_pantry_to_table cannot directly follow
        // nav_table_to_cupboard: robot would be at the cupboard
        let plan = Plan::new([
            "nav_table_to_cupboard",
            "nav_cupboard_to_pantry",
            "nav_pantry_to_table",
        ]);
        assert!(verify(&g, &st("(table, null, null)"), &plan, true).is_feasible());
        let bad = Plan::new(["place_bowl_table", "place_bowl_table"]);
        let report = verify(&g, &st("(table, bowl, null)"), &bad, true);
        assert_eq!(
            report.conflict.unwrap().kind,
            ConflictKind::NonAdjacentTransition
        );
    }

    #[test]
    fn plan_file_format() {
        let plan: Plan = "# fixture\npick_bowl_pantry\n\n  nav_pantry_to_table  # go\n"
            .parse()
            .unwrap();
        assert_eq!(plan, Plan::new(["pick_bowl_pantry", "nav_pantry_to_table"]));
        assert_eq!(plan.to_text().parse::<Plan>().unwrap(), plan);
        assert!("bad id here".parse::<Plan>().is_err());
    }
}
